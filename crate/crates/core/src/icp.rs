//! Robust point-to-point ICP with a Tukey biweight kernel.
//!
//! Each iteration associates every transformed source point with its exact
//! nearest target point within the correspondence radius, then solves the
//! Tukey-weighted Procrustes problem from the original source points. This is
//! a majorize-minimize scheme, so the robust objective never increases.

use crate::geometry::{rotation_angle, weighted_alignment, GeometryError, ScaleMode, Sim3Transform, Vec3};
use crate::geodesy_metrics::percentile;
use crate::raster_io::{read_raster, xyz_points, RasterError, Semantic};
use crate::spatial_hash::SpatialHash;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IcpError {
    #[error("no correspondences within {radius} m at the initial transform")]
    NoCorrespondences { radius: f64 },
    #[error("objective increased for 3 consecutive iterations (iteration {iteration})")]
    Diverged { iteration: usize },
    #[error("invalid ICP input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// `None`: 5 x the kernel scale.
    pub correspondence_radius: Option<f64>,
    /// `None`: 3 x the median initial nearest-neighbour distance.
    pub tukey_k: Option<f64>,
    pub translation_tol_m: f64,
    pub rotation_tol_deg: f64,
    pub estimate_scale: bool,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            correspondence_radius: None,
            tukey_k: None,
            translation_tol_m: 1e-8,
            rotation_tol_deg: 1e-7,
            estimate_scale: false,
        }
    }
}

/// Tukey biweight weight `(1 - (r/k)^2)^2` for `r < k`, else 0.
pub fn tukey_weight(r: f64, k: f64) -> f64 {
    if r.abs() >= k {
        0.0
    } else {
        let u = r / k;
        let t = 1.0 - u * u;
        t * t
    }
}

/// Tukey biweight loss; saturates at `k^2 / 6`.
pub fn tukey_rho(r: f64, k: f64) -> f64 {
    let cap = k * k / 6.0;
    if r.abs() >= k {
        cap
    } else {
        let u = r / k;
        let t = 1.0 - u * u;
        cap * (1.0 - t * t * t)
    }
}

/// Reads a point cloud from a CSV with an `x,y,z` header or a GRR1 Xyz3
/// raster (nodata pixels skipped). The format is chosen by extension.
pub fn read_point_cloud(path: &Path) -> Result<Vec<Vec3>, RasterError> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if !is_csv {
        let r = read_raster(path)?;
        if r.semantic() != Semantic::Xyz3 {
            return Err(RasterError::InvalidValue(format!("{}: expected an Xyz3 raster, found {:?}", path.display(), r.semantic())));
        }
        return Ok(xyz_points(&r));
    }
    let bad = |msg: String| RasterError::Format(format!("{}: {msg}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?;
    if headers.iter().map(str::trim).collect::<Vec<_>>() != ["x", "y", "z"] {
        return Err(bad(format!("expected header x,y,z, found {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut points = Vec::new();
    for (line, rec) in reader.deserialize::<(f64, f64, f64)>().enumerate() {
        let (x, y, z) = rec.map_err(|e| bad(format!("record {}: {e}", line + 1)))?;
        points.push(Vec3::new(x, y, z));
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpIterate {
    /// Robust objective at the transform entering this iteration.
    pub objective: f64,
    pub matched: usize,
    pub translation_step_m: f64,
    pub rotation_step_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: Sim3Transform,
    pub trace: Vec<IcpIterate>,
    /// Objective at the returned transform.
    pub final_objective: f64,
    pub converged: bool,
    pub tukey_k: f64,
    pub correspondence_radius: f64,
}

fn bbox_diagonal(points: &[Vec3]) -> f64 {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

struct Association {
    pairs: Vec<Option<(usize, f64)>>,
}

impl Association {
    fn objective(&self, k: f64) -> f64 {
        self.pairs.iter().map(|p| p.map_or(k * k / 6.0, |(_, r)| tukey_rho(r, k))).sum()
    }

    fn matched(&self) -> usize {
        self.pairs.iter().filter(|p| p.is_some()).count()
    }
}

fn associate(source: &[Vec3], t: &Sim3Transform, hash: &SpatialHash, radius: f64) -> Association {
    Association { pairs: source.par_iter().map(|s| hash.nearest_within(&t.apply(s), radius)).collect() }
}

pub fn icp_refine(source: &[Vec3], target: &[Vec3], init: &Sim3Transform, cfg: &IcpConfig) -> Result<IcpResult, IcpError> {
    if source.len() < 3 || target.len() < 3 {
        return Err(IcpError::InvalidInput(format!(
            "need at least 3 points per cloud, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    if !source.iter().chain(target).all(|p| p.iter().all(|v| v.is_finite())) {
        return Err(IcpError::InvalidInput("non-finite point".into()));
    }
    if cfg.max_iterations == 0 {
        return Err(IcpError::InvalidInput("max_iterations must be at least 1".into()));
    }
    let k = match cfg.tukey_k {
        Some(k) => k,
        None => {
            let coarse = SpatialHash::new(target, (bbox_diagonal(target) / 32.0).max(1e-9));
            let initial: Vec<f64> = source.par_iter().map(|s| coarse.nearest(&init.apply(s)).map_or(0.0, |(_, d)| d)).collect();
            let floor = 1e-6 * bbox_diagonal(target).max(1e-12);
            (3.0 * percentile(&initial, 0.5)).max(floor)
        }
    };
    let radius = cfg.correspondence_radius.unwrap_or(5.0 * k);
    for (name, v) in [("tukey_k", k), ("correspondence_radius", radius), ("translation_tol_m", cfg.translation_tol_m), ("rotation_tol_deg", cfg.rotation_tol_deg)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(IcpError::InvalidInput(format!("{name} must be positive, got {v}")));
        }
    }
    let hash = SpatialHash::new(target, radius);
    let scale_mode = if cfg.estimate_scale { ScaleMode::Estimate } else { ScaleMode::Fixed(init.scale()) };

    let mut t = *init;
    let mut assoc = associate(source, &t, &hash, radius);
    if assoc.matched() == 0 {
        return Err(IcpError::NoCorrespondences { radius });
    }
    let mut objective = assoc.objective(k);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut increases = 0;
    for iteration in 0..cfg.max_iterations {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut w = Vec::new();
        for (s, p) in source.iter().zip(&assoc.pairs) {
            if let Some((j, r)) = *p {
                let wi = tukey_weight(r, k);
                if wi > 0.0 {
                    src.push(*s);
                    dst.push(target[j]);
                    w.push(wi);
                }
            }
        }
        let next = if src.len() >= 3 { weighted_alignment(&src, &dst, Some(&w), scale_mode).ok() } else { None };
        let Some(next) = next else {
            trace.push(IcpIterate { objective, matched: assoc.matched(), translation_step_m: 0.0, rotation_step_deg: 0.0 });
            break;
        };
        let dt = (next.translation() - t.translation()).norm();
        let dr = rotation_angle(&(next.rotation() * t.rotation().transpose())).to_degrees();
        let ds = (next.scale() - t.scale()).abs();
        trace.push(IcpIterate { objective, matched: assoc.matched(), translation_step_m: dt, rotation_step_deg: dr });
        let next_assoc = associate(source, &next, &hash, radius);
        let next_objective = next_assoc.objective(k);
        if next_objective > objective * (1.0 + 1e-12) + 1e-300 {
            increases += 1;
            if increases >= 3 {
                return Err(IcpError::Diverged { iteration });
            }
        } else {
            increases = 0;
        }
        t = next;
        assoc = next_assoc;
        objective = next_objective;
        if dt < cfg.translation_tol_m && dr < cfg.rotation_tol_deg && ds < 1e-12 * t.scale() {
            converged = true;
            break;
        }
    }
    Ok(IcpResult { transform: t, trace, final_objective: objective, converged, tukey_k: k, correspondence_radius: radius })
}
