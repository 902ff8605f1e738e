//! Gravity (up) vector estimation from ground points and camera poses.

use crate::geometry::{ransac_sample, GeometryError, Sim3Transform, Vec3};
use crate::raster_io::Raster;
use nalgebra::{Matrix3, Rotation3, SymmetricEigen, Unit, UnitQuaternion};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GravityError {
    #[error("only {found} ground points (need at least 3)")]
    TooFewGroundPoints { found: usize },
    #[error("no ground mask for image {0:?}")]
    MissingMask(String),
    #[error("no sampled camera ray intersects the plane")]
    NoIntersections,
    #[error("up-vector vote tied at {0} rays per side")]
    Ambiguous(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Pinhole camera: looks along its local +z, with x to the right and y down.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub id: String,
    pub center: Vec3,
    /// Camera-to-world rotation; columns are the camera axes in world coordinates.
    pub orientation: Matrix3<f64>,
}

/// JSON form of a [`CameraPose`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: String,
    pub center_xyz: [f64; 3],
    pub rotation_quaternion_wxyz: [f64; 4],
}

impl CameraPose {
    pub fn new(id: impl Into<String>, center: Vec3, orientation: Matrix3<f64>) -> Result<Self, GeometryError> {
        Sim3Transform::rigid(orientation, Vec3::zeros())?;
        Ok(Self { id: id.into(), center, orientation })
    }

    /// Camera at `center` looking at `target`, image rows pointing as close
    /// to world -z as possible. A camera looking straight down has +x right.
    pub fn look_at(id: impl Into<String>, center: Vec3, target: Vec3) -> Self {
        let forward = (target - center).normalize();
        let side = forward.cross(&Vec3::z());
        let right = if side.norm() < 1e-12 { Vec3::x() * forward.z.signum() * -1.0 } else { side.normalize() };
        let down = forward.cross(&right);
        Self { id: id.into(), center, orientation: Matrix3::from_columns(&[right, down, forward]) }
    }

    pub fn forward(&self) -> Vec3 {
        self.orientation.column(2).into_owned()
    }

    /// The same physical camera expressed in the target frame of `t`.
    pub fn transformed(&self, t: &Sim3Transform) -> Self {
        Self { id: self.id.clone(), center: t.apply(&self.center), orientation: t.rotation() * self.orientation }
    }

    pub fn to_record(&self) -> CameraRecord {
        let q = UnitQuaternion::from_matrix(&self.orientation);
        let q = if q.w < 0.0 { UnitQuaternion::new_unchecked(-q.into_inner()) } else { q };
        CameraRecord {
            id: self.id.clone(),
            center_xyz: [self.center.x, self.center.y, self.center.z],
            rotation_quaternion_wxyz: [q.w, q.i, q.j, q.k],
        }
    }
}

impl TryFrom<&CameraRecord> for CameraPose {
    type Error = GeometryError;

    fn try_from(rec: &CameraRecord) -> Result<Self, Self::Error> {
        let [w, x, y, z] = rec.rotation_quaternion_wxyz;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if !(q.norm() > 0.0) || !rec.center_xyz.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidTransform(format!("camera {}: invalid pose", rec.id)));
        }
        let [cx, cy, cz] = rec.center_xyz;
        let rot = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        CameraPose::new(rec.id.clone(), Vec3::new(cx, cy, cz), rot)
    }
}

/// Plane `{p : normal . p = offset}` with unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneModel {
    pub normal: Vec3,
    pub offset: f64,
}

impl PlaneModel {
    pub fn distance(&self, p: &Vec3) -> f64 {
        (self.normal.dot(p) - self.offset).abs()
    }

    pub fn flipped(&self) -> Self {
        Self { normal: -self.normal, offset: -self.offset }
    }
}

/// Image observation of a reconstructed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub image: String,
    pub row: f64,
    pub col: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedPoint {
    pub xyz: Vec3,
    pub observations: Vec<Observation>,
}

/// Keeps points with at least `min_fraction` of their observations on mask
/// value 1 (nearest pixel). Observations outside the mask count as non-ground.
pub fn select_ground_points(
    points: &[ObservedPoint],
    masks: &BTreeMap<String, Raster>,
    min_fraction: f64,
) -> Result<Vec<Vec3>, GravityError> {
    let mut ground = Vec::new();
    for p in points {
        if p.observations.is_empty() {
            continue;
        }
        let mut hits = 0usize;
        for obs in &p.observations {
            let mask = masks.get(&obs.image).ok_or_else(|| GravityError::MissingMask(obs.image.clone()))?;
            if mask.contains(obs.row, obs.col) {
                let r = (obs.row.round().max(0.0) as usize).min(mask.height() - 1);
                let c = (obs.col.round().max(0.0) as usize).min(mask.width() - 1);
                if !mask.pixel_is_nodata(r, c) && mask.get(r, c, 0) == 1.0 {
                    hits += 1;
                }
            }
        }
        if hits as f64 >= min_fraction * p.observations.len() as f64 {
            ground.push(p.xyz);
        }
    }
    if ground.len() < 3 {
        return Err(GravityError::TooFewGroundPoints { found: ground.len() });
    }
    Ok(ground)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaneRansacConfig {
    /// Absolute threshold; `None` means 0.01 x the bounding-box diagonal.
    pub inlier_threshold: Option<f64>,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for PlaneRansacConfig {
    fn default() -> Self {
        Self { inlier_threshold: None, iterations: 1000, seed: 0 }
    }
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

/// Least-squares plane through `points`, with eigenvalues ascending.
fn fit_plane(points: &[Vec3]) -> (PlaneModel, Vec3) {
    let centroid = points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len() as f64;
    let scatter = points.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p - centroid;
        a + d * d.transpose()
    });
    let eig = SymmetricEigen::new(scatter);
    let mut idx = [0, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let normal = canonical_sign(eig.eigenvectors.column(idx[0]).into_owned().normalize());
    let values = Vec3::new(eig.eigenvalues[idx[0]], eig.eigenvalues[idx[1]], eig.eigenvalues[idx[2]]);
    (PlaneModel { normal, offset: normal.dot(&centroid) }, values)
}

/// Sign convention: the largest-magnitude component of the normal is positive.
fn canonical_sign(n: Vec3) -> Vec3 {
    if n[n.iamax()] < 0.0 {
        -n
    } else {
        n
    }
}

const MAX_REFITS: usize = 20;

/// RANSAC plane fit followed by a least-squares refit on the inliers.
///
/// Returns the plane and the inlier mask of the refit plane.
pub fn ransac_plane(points: &[Vec3], cfg: &PlaneRansacConfig) -> Result<(PlaneModel, Vec<bool>), GravityError> {
    if points.len() < 3 {
        return Err(GeometryError::DegenerateInput(format!("need at least 3 points, got {}", points.len())).into());
    }
    if cfg.iterations == 0 {
        return Err(GeometryError::InvalidConfig("iterations must be at least 1".into()).into());
    }
    let (_, eig) = fit_plane(points);
    if eig[1] <= 1e-12 * eig[2] || eig[2] <= 0.0 {
        return Err(GeometryError::DegenerateInput("points are collinear or coincident".into()).into());
    }
    let threshold = cfg.inlier_threshold.unwrap_or(0.01 * bbox_diagonal(points));
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(GeometryError::InvalidConfig(format!("plane inlier threshold must be positive, got {threshold}")).into());
    }

    let n = points.len();
    let score = |plane: &PlaneModel| {
        points.iter().fold((0usize, 0.0f64), |(c, s), p| {
            let d = plane.distance(p);
            if d < threshold {
                (c + 1, s + d)
            } else {
                (c, s)
            }
        })
    };
    let best = (0..cfg.iterations)
        .into_par_iter()
        .filter_map(|it| {
            let s = ransac_sample(cfg.seed, it, n, 3);
            let (a, b, c) = (points[s[0]], points[s[1]], points[s[2]]);
            let cross = (b - a).cross(&(c - a));
            let scale = (b - a).norm() * (c - a).norm();
            if !(cross.norm() > 1e-12 * scale) {
                return None;
            }
            let normal = canonical_sign(cross.normalize());
            let plane = PlaneModel { normal, offset: normal.dot(&a) };
            let (count, sum) = score(&plane);
            Some((count, sum, it, plane))
        })
        .reduce_with(|x, y| {
            let x_wins = x.0 > y.0 || (x.0 == y.0 && (x.1 < y.1 || (x.1 == y.1 && x.2 < y.2)));
            if x_wins {
                x
            } else {
                y
            }
        });
    let Some((_, _, _, plane)) = best else {
        return Err(GeometryError::NoConsensus { best: 0 }.into());
    };
    // A band near the noise level truncates the residual distribution and
    // pulls each refit toward the previous tilt. Refit inside a band of at
    // least three robust standard deviations instead, iterated to a fixed set.
    let mut abs: Vec<f64> = points.iter().map(|p| plane.distance(p)).filter(|d| *d < 3.0 * threshold).collect();
    abs.sort_by(f64::total_cmp);
    let sigma = if abs.is_empty() { 0.0 } else { 1.4826 * abs[abs.len() / 2] };
    let band = threshold.max(3.0 * sigma).min(3.0 * threshold);
    let mut refit = plane;
    let mut mask: Vec<bool> = points.iter().map(|p| plane.distance(p) < band).collect();
    for _ in 0..MAX_REFITS {
        let inliers: Vec<Vec3> = points.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
        if inliers.len() < 3 {
            break;
        }
        refit = fit_plane(&inliers).0;
        let next: Vec<bool> = points.iter().map(|p| refit.distance(p) < band).collect();
        if next == mask {
            break;
        }
        mask = next;
    }
    let mask = points.iter().map(|p| refit.distance(p) < threshold).collect();
    Ok((refit, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RayConfig {
    /// Rays per camera are a `grid x grid` lattice over the field of view.
    pub grid: usize,
    pub fov_deg: f64,
}

impl Default for RayConfig {
    fn default() -> Self {
        Self { grid: 5, fov_deg: 60.0 }
    }
}

fn ray_directions(cam: &CameraPose, cfg: &RayConfig) -> Vec<Vec3> {
    let half = (0.5 * cfg.fov_deg).to_radians().tan();
    let grid = cfg.grid.max(1);
    let coord = |i: usize| if grid == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (grid - 1) as f64 };
    let mut dirs = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        for j in 0..grid {
            let d = Vec3::new(half * coord(j), half * coord(i), 1.0).normalize();
            dirs.push(cam.orientation * d);
        }
    }
    dirs
}

/// Chooses the orientation of the plane normal that points to the side the
/// cameras see the plane from: most camera rays hitting the plane must have a
/// negative dot product with up.
pub fn disambiguate_up(plane: &PlaneModel, cameras: &[CameraPose], cfg: &RayConfig) -> Result<Vec3, GravityError> {
    let n = plane.normal.normalize();
    let (mut along, mut against) = (0usize, 0usize);
    for cam in cameras {
        for d in ray_directions(cam, cfg) {
            let nd = n.dot(&d);
            if nd == 0.0 {
                continue;
            }
            let t = (plane.offset - n.dot(&cam.center)) / nd;
            if t > 0.0 {
                if nd < 0.0 {
                    against += 1;
                } else {
                    along += 1;
                }
            }
        }
    }
    match (against, along) {
        (0, 0) => Err(GravityError::NoIntersections),
        (a, b) if a > b => Ok(n),
        (a, b) if b > a => Ok(-n),
        (a, _) => Err(GravityError::Ambiguous(a)),
    }
}

/// Minimal-angle rotation taking `up` to +z. `up = -z` maps to 180 degrees about x.
pub fn z_up_rotation(up: &Vec3) -> Sim3Transform {
    let u = up.normalize();
    let axis = Vec3::new(u.y, -u.x, 0.0);
    let horiz = axis.norm();
    let rot = if horiz == 0.0 {
        if u.z > 0.0 {
            Matrix3::identity()
        } else {
            *Rotation3::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI).matrix()
        }
    } else {
        let angle = horiz.atan2(u.z);
        *Rotation3::from_axis_angle(&Unit::new_unchecked(axis / horiz), angle).matrix()
    };
    Sim3Transform::rigid(rot, Vec3::zeros()).expect("axis-angle rotation is proper")
}

/// Full chain: plane fit on ground points, up disambiguation, z-up rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct GravityEstimate {
    pub plane: PlaneModel,
    pub inlier_mask: Vec<bool>,
    pub up: Vec3,
    pub rotation: Sim3Transform,
}

pub fn estimate_gravity(
    ground: &[Vec3],
    cameras: &[CameraPose],
    plane_cfg: &PlaneRansacConfig,
    ray_cfg: &RayConfig,
) -> Result<GravityEstimate, GravityError> {
    let (plane, inlier_mask) = ransac_plane(ground, plane_cfg)?;
    let up = disambiguate_up(&plane, cameras, ray_cfg)?;
    Ok(GravityEstimate { plane, inlier_mask, up, rotation: z_up_rotation(&up) })
}
