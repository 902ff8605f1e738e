//! Lifting 2D matches to 3D correspondences through per-pixel coordinate
//! rasters or a georeferenced DSM.

use crate::geometry::{Correspondences3D, Vec3};
use crate::match_filter::MatchSet;
use crate::raster_io::{dsm_pixel_to_xyz, xyz_image_lookup, GeoTransform, Raster, RasterError};
use rayon::prelude::*;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("no match could be lifted ({dropped} dropped)")]
    EmptyResult { dropped: usize },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {message}")]
    Csv { path: String, message: String },
}

/// Pixel locations of a lifted pair: `((row_a, col_a), (row_b, col_b))`.
pub type PixelPair = ((f64, f64), (f64, f64));

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LiftedMatches {
    pub corr: Correspondences3D,
    pub provenance: Vec<PixelPair>,
    pub dropped_count: usize,
}

impl LiftedMatches {
    pub fn len(&self) -> usize {
        self.corr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corr.is_empty()
    }
}

/// Lookup errors that only drop the pair; anything else is a caller error.
fn droppable(e: &RasterError) -> bool {
    matches!(e, RasterError::OutOfBounds { .. } | RasterError::NoDataAtPixel { .. })
}

fn lift_with(
    matches: &MatchSet,
    side_a: impl Fn(f64, f64) -> Result<Vec3, RasterError> + Sync,
    side_b: impl Fn(f64, f64) -> Result<Vec3, RasterError> + Sync,
) -> Result<LiftedMatches, LiftError> {
    let lifted: Vec<Option<(Vec3, Vec3)>> = matches
        .matches
        .par_iter()
        .map(|m| {
            let a = match side_a(m.row_a, m.col_a) {
                Ok(v) => v,
                Err(e) if droppable(&e) => return Ok(None),
                Err(e) => return Err(e),
            };
            match side_b(m.row_b, m.col_b) {
                Ok(b) => Ok(Some((a, b))),
                Err(e) if droppable(&e) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_, RasterError>>()?;
    let mut out = LiftedMatches::default();
    for (m, l) in matches.matches.iter().zip(lifted) {
        match l {
            Some((a, b)) => {
                out.corr.push(a, b);
                out.provenance.push(((m.row_a, m.col_a), (m.row_b, m.col_b)));
            }
            None => out.dropped_count += 1,
        }
    }
    if out.corr.is_empty() {
        return Err(LiftError::EmptyResult { dropped: out.dropped_count });
    }
    Ok(out)
}

/// Side A from an XYZ raster, side B from a DSM in its local metric frame.
pub fn lift_xyz_to_dsm(matches: &MatchSet, xyz_a: &Raster, dsm: &Raster, geo: &GeoTransform) -> Result<LiftedMatches, LiftError> {
    geo.validate()?;
    lift_with(matches, |r, c| xyz_image_lookup(xyz_a, r, c), |r, c| dsm_pixel_to_xyz(dsm, geo, r, c))
}

/// Both sides from XYZ rasters.
pub fn lift_xyz_to_xyz(matches: &MatchSet, xyz_a: &Raster, xyz_b: &Raster) -> Result<LiftedMatches, LiftError> {
    lift_with(matches, |r, c| xyz_image_lookup(xyz_a, r, c), |r, c| xyz_image_lookup(xyz_b, r, c))
}

/// Debug export with header `xa,ya,za,xb,yb,zb`.
pub fn write_lifted_csv(lifted: &LiftedMatches, path: &Path) -> Result<(), LiftError> {
    let err = |e: csv::Error| LiftError::Csv { path: path.display().to_string(), message: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["xa", "ya", "za", "xb", "yb", "zb"]).map_err(err)?;
    for (a, b) in lifted.corr.source.iter().zip(&lifted.corr.target) {
        w.write_record([a.x, a.y, a.z, b.x, b.y, b.z].map(|v| v.to_string())).map_err(err)?;
    }
    w.flush().map_err(|e| LiftError::Csv { path: path.display().to_string(), message: e.to_string() })
}
