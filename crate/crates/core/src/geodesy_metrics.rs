//! WGS84 geodetic <-> local east-north-up conversion and the georegistration
//! error statistics reported per site.
//!
//! ENU offsets are computed from trigonometric difference identities rather
//! than by subtracting two absolute ECEF vectors, so they keep sub-nanometre
//! accuracy near the anchor instead of inheriting the ~1e-9 m rounding of
//! Earth-radius-sized coordinates.

use crate::geometry::Vec3;
use crate::raster_io::DsmCovariance;
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS84 semi-major axis (m).
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// First eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("covariance is singular")]
    SingularCovariance,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Camera position in geodetic coordinates, as in truth/estimate files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeodeticCamera {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
}

impl GeodeticCamera {
    pub fn point(&self) -> GeodeticPoint {
        GeodeticPoint { lat_deg: self.lat, lon_deg: self.lon, alt_m: self.alt }
    }
}

/// WGS84 latitude/longitude (degrees) and ellipsoidal height (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodeticPoint {
    #[serde(rename = "lat")]
    pub lat_deg: f64,
    #[serde(rename = "lon")]
    pub lon_deg: f64,
    #[serde(rename = "alt")]
    pub alt_m: f64,
}

impl GeodeticPoint {
    pub fn new(lat_deg: f64, lon_deg: f64, alt_m: f64) -> Result<Self, MetricsError> {
        let p = Self { lat_deg, lon_deg, alt_m };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.lat_deg.abs() <= 90.0 && self.lon_deg.abs() <= 180.0 && self.alt_m.is_finite()) {
            return Err(MetricsError::InvalidInput(format!(
                "geodetic point out of range: lat {}, lon {}, alt {}",
                self.lat_deg, self.lon_deg, self.alt_m
            )));
        }
        Ok(())
    }
}

fn prime_vertical_radius(sin_lat: f64) -> f64 {
    WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt()
}

pub fn geodetic_to_ecef(p: &GeodeticPoint) -> Vec3 {
    let (sl, cl) = p.lat_deg.to_radians().sin_cos();
    let (so, co) = p.lon_deg.to_radians().sin_cos();
    let n = prime_vertical_radius(sl);
    Vec3::new((n + p.alt_m) * cl * co, (n + p.alt_m) * cl * so, (n * (1.0 - WGS84_E2) + p.alt_m) * sl)
}

/// Iterative ECEF -> geodetic; converges to machine precision in a few steps.
pub fn ecef_to_geodetic(x: &Vec3) -> GeodeticPoint {
    let p = x.x.hypot(x.y);
    let lon = x.y.atan2(x.x);
    let mut lat = x.z.atan2(p * (1.0 - WGS84_E2));
    for _ in 0..10 {
        let (sl, cl) = lat.sin_cos();
        let n = prime_vertical_radius(sl);
        let alt = p * cl + x.z * sl - WGS84_A * (1.0 - WGS84_E2 * sl * sl).sqrt();
        let next = x.z.atan2(p * (1.0 - WGS84_E2 * n / (n + alt)));
        let done = (next - lat).abs() < 1e-15;
        lat = next;
        if done {
            break;
        }
    }
    let sl = lat.sin();
    let alt = p * lat.cos() + x.z * sl - WGS84_A * (1.0 - WGS84_E2 * sl * sl).sqrt();
    GeodeticPoint { lat_deg: lat.to_degrees(), lon_deg: lon.to_degrees(), alt_m: alt }
}

fn wrap_degrees(d: f64) -> f64 {
    if (-180.0..=180.0).contains(&d) {
        d
    } else {
        let w = (d + 180.0).rem_euclid(360.0) - 180.0;
        if w == -180.0 && d > 0.0 {
            180.0
        } else {
            w
        }
    }
}

/// `a - b` as an unevaluated sum `hi + lo` (Knuth's TwoSum).
fn two_diff(a: f64, b: f64) -> (f64, f64) {
    let hi = a - b;
    let bb = hi - a;
    let lo = (a - (hi - bb)) + (-b - bb);
    (hi, lo)
}

/// Longitude difference in degrees, wrapped to [-180, 180] without rounding
/// away the low-order bits.
fn lon_difference(lon: f64, lon0: f64) -> f64 {
    let (hi, lo) = two_diff(lon, lon0);
    let hi = if hi > 180.0 {
        hi - 360.0
    } else if hi < -180.0 {
        hi + 360.0
    } else {
        hi
    };
    hi + lo
}

/// Rows are the east, north and up unit vectors of the anchor, in ECEF.
pub fn enu_rotation(anchor: &GeodeticPoint) -> Matrix3<f64> {
    let (sl, cl) = anchor.lat_deg.to_radians().sin_cos();
    let (so, co) = anchor.lon_deg.to_radians().sin_cos();
    Matrix3::new(-so, co, 0.0, -sl * co, -sl * so, cl, cl * co, cl * so, sl)
}

/// East-north-up offset (m) of `p` from `anchor`.
pub fn geodetic_to_enu(p: &GeodeticPoint, anchor: &GeodeticPoint) -> Vec3 {
    let lat0 = anchor.lat_deg.to_radians();
    let lat = p.lat_deg.to_radians();
    let (dlat_hi, dlat_lo) = two_diff(p.lat_deg, anchor.lat_deg);
    let dlat = (dlat_hi + dlat_lo).to_radians();
    let dlon = lon_difference(p.lon_deg, anchor.lon_deg).to_radians();
    let (s0, c0) = lat0.sin_cos();
    let (s, c) = lat.sin_cos();
    let half_sum = 0.5 * (lat + lat0);
    let sin_half_d = (0.5 * dlat).sin();
    let cos_diff = -2.0 * half_sum.sin() * sin_half_d; // cos(lat) - cos(lat0)
    let sin_diff = 2.0 * half_sum.cos() * sin_half_d; // sin(lat) - sin(lat0)

    let d = 1.0 - WGS84_E2 * s * s;
    let d0 = 1.0 - WGS84_E2 * s0 * s0;
    let n = WGS84_A / d.sqrt();
    let n0 = WGS84_A / d0.sqrt();
    let (sd, cd) = (d.sqrt(), d0.sqrt());
    let d0_minus_d = WGS84_E2 * dlat.sin() * (lat + lat0).sin();
    let n_diff = WGS84_A * d0_minus_d / (sd * cd * (sd + cd));
    let dh = p.alt_m - anchor.alt_m;

    // Work in the ECEF frame rotated about z by the anchor longitude.
    let rho = (n + p.alt_m) * c;
    let rho0 = (n0 + anchor.alt_m) * c0;
    let rho_diff = n_diff * c + dh * c + (n0 + anchor.alt_m) * cos_diff;
    debug_assert!((rho - rho0 - rho_diff).abs() < 1e-6 * (1.0 + rho_diff.abs()));
    let half = (0.5 * dlon).sin();
    let dx = rho_diff - 2.0 * rho * half * half;
    let dy = rho * dlon.sin();
    let dz = (1.0 - WGS84_E2) * (n_diff * s + n0 * sin_diff) + dh * s + anchor.alt_m * sin_diff;

    Vec3::new(dy, -s0 * dx + c0 * dz, c0 * dx + s0 * dz)
}

/// Inverse of [`geodetic_to_enu`]: an absolute-ECEF first guess refined by
/// Newton steps on the exact forward model.
pub fn enu_to_geodetic(enu: &Vec3, anchor: &GeodeticPoint) -> GeodeticPoint {
    let ecef = geodetic_to_ecef(anchor) + enu_rotation(anchor).transpose() * enu;
    let mut p = ecef_to_geodetic(&ecef);
    let r0 = enu_rotation(anchor);
    for _ in 0..3 {
        let residual = enu - geodetic_to_enu(&p, anchor);
        if residual.norm() < 1e-12 {
            break;
        }
        let (sl, cl) = p.lat_deg.to_radians().sin_cos();
        let (so, co) = p.lon_deg.to_radians().sin_cos();
        let d = 1.0 - WGS84_E2 * sl * sl;
        let n = WGS84_A / d.sqrt();
        let m = WGS84_A * (1.0 - WGS84_E2) / (d * d.sqrt());
        let north = Vec3::new(-sl * co, -sl * so, cl);
        let east = Vec3::new(-so, co, 0.0);
        let up = Vec3::new(cl * co, cl * so, sl);
        let jac = Matrix3::from_columns(&[
            r0 * north * (m + p.alt_m) * std::f64::consts::PI / 180.0,
            r0 * east * (n + p.alt_m) * cl * std::f64::consts::PI / 180.0,
            r0 * up,
        ]);
        let Some(inv) = jac.try_inverse() else { break };
        let step = inv * residual;
        p = GeodeticPoint {
            lat_deg: p.lat_deg + step.x,
            lon_deg: wrap_degrees(p.lon_deg + step.y),
            alt_m: p.alt_m + step.z,
        };
    }
    p
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of unsorted samples.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Georegistration error statistics over a set of cameras (metres, local ENU).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub camera_count: usize,
    pub errors: Vec<[f64; 3]>,
    pub mean_error: [f64; 3],
    pub mean_absolute_error: f64,
    pub mean_relative_error: f64,
    pub median_relative_error: f64,
    /// Mahalanobis distance of the mean error vector under the DSM covariance.
    pub mahalanobis_distance: f64,
    /// Per-camera Mahalanobis distances, for diagnostics.
    pub per_camera_mahalanobis: Vec<f64>,
    pub mean_per_camera_mahalanobis: f64,
    pub ce90: f64,
    pub le90: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inlier_fraction: Option<f64>,
}

fn mahalanobis(v: &Vec3, chol: &nalgebra::Cholesky<f64, nalgebra::U3>) -> f64 {
    v.dot(&chol.solve(v)).max(0.0).sqrt()
}

/// Compares estimated and ground-truth camera positions.
///
/// Relative errors subtract the mean error vector first; CE90/LE90 are the
/// 90th percentiles of horizontal and absolute vertical error.
pub fn evaluate(estimated: &[Vec3], truth: &[Vec3], cov: &DsmCovariance) -> Result<RegistrationReport, MetricsError> {
    if estimated.len() != truth.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} estimated positions vs {} ground-truth positions",
            estimated.len(),
            truth.len()
        )));
    }
    if estimated.is_empty() {
        return Err(MetricsError::ShapeMismatch("no cameras to evaluate".into()));
    }
    let chol = nalgebra::Cholesky::new(*cov.sigma()).ok_or(MetricsError::SingularCovariance)?;
    let errors: Vec<Vec3> = estimated.iter().zip(truth).map(|(e, t)| e - t).collect();
    let n = errors.len() as f64;
    let mean = errors.iter().fold(Vec3::zeros(), |acc, e| acc + e) / n;
    let abs: Vec<f64> = errors.iter().map(|e| e.norm()).collect();
    let rel: Vec<f64> = errors.iter().map(|e| (e - mean).norm()).collect();
    let horizontal: Vec<f64> = errors.iter().map(|e| e.x.hypot(e.y)).collect();
    let vertical: Vec<f64> = errors.iter().map(|e| e.z.abs()).collect();
    let per_camera: Vec<f64> = errors.iter().map(|e| mahalanobis(e, &chol)).collect();
    Ok(RegistrationReport {
        camera_count: errors.len(),
        errors: errors.iter().map(|e| [e.x, e.y, e.z]).collect(),
        mean_error: [mean.x, mean.y, mean.z],
        mean_absolute_error: abs.iter().sum::<f64>() / n,
        mean_relative_error: rel.iter().sum::<f64>() / n,
        median_relative_error: percentile(&rel, 0.5),
        mahalanobis_distance: mahalanobis(&mean, &chol),
        mean_per_camera_mahalanobis: per_camera.iter().sum::<f64>() / n,
        per_camera_mahalanobis: per_camera,
        ce90: percentile(&horizontal, 0.9),
        le90: percentile(&vertical, 0.9),
        inlier_fraction: None,
    })
}

/// Error per metre of standoff distance.
pub fn normalize_by_standoff(mean_relative_error: f64, mean_standoff_m: f64) -> Result<f64, MetricsError> {
    if !(mean_standoff_m > 0.0 && mean_standoff_m.is_finite()) {
        return Err(MetricsError::InvalidInput(format!("standoff must be positive, got {mean_standoff_m}")));
    }
    Ok(mean_relative_error / mean_standoff_m)
}

impl RegistrationReport {
    pub fn relative_error_per_meter(&self, mean_standoff_m: f64) -> Result<f64, MetricsError> {
        normalize_by_standoff(self.mean_relative_error, mean_standoff_m)
    }
}

/// Mean distance from the cameras to the scene centre.
pub fn mean_standoff(cameras: &[Vec3], scene_center: &Vec3) -> f64 {
    cameras.iter().map(|c| (c - scene_center).norm()).sum::<f64>() / cameras.len().max(1) as f64
}
