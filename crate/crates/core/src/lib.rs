//! Geometric core of a metadata-free georegistration pipeline.

pub mod geodesy_metrics;
pub mod geometry;
pub mod gravity;
pub mod icp;
pub mod lifting;
pub mod match_filter;
pub mod raster_io;
pub mod registration;
pub mod spatial_hash;
pub mod synth;
