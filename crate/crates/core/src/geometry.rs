//! Similarity transforms and their estimation from 3D point correspondences.
//!
//! The estimation stack is the closed-form Kabsch-Umeyama least-squares fit,
//! wrapped in a seeded RANSAC loop for contaminated correspondence sets.

use nalgebra::{Matrix3, Rotation3, SymmetricEigen, UnitQuaternion, Vector3, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Orthonormality and determinant tolerance for rotation matrices.
const ROTATION_TOL: f64 = 1e-9;

/// Relative eigenvalue floor below which a centered point scatter is treated
/// as rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Number of RANSAC hypotheses evaluated per parallel batch.
const RANSAC_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("no consensus: best hypothesis has {best} inliers (need at least 3)")]
    NoConsensus { best: usize },
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// A 7-DoF similarity transform `p -> scale * rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3Transform {
    scale: f64,
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Sim3Transform {
    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(GeometryError::InvalidTransform(format!("scale must be positive and finite, got {scale}")));
        }
        if !translation.iter().all(|v| v.is_finite()) || !rotation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidTransform("non-finite parameters".into()));
        }
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho_err > ROTATION_TOL {
            return Err(GeometryError::InvalidTransform(format!("rotation not orthonormal (error {ortho_err:e})")));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::InvalidTransform(format!("rotation determinant is {det}")));
        }
        Ok(Self { scale, rotation, translation })
    }

    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    pub fn from_quaternion(scale: f64, rotation: UnitQuaternion<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        Self::new(scale, *rotation.to_rotation_matrix().matrix(), translation)
    }

    /// Rigid transform (scale 1).
    pub fn rigid(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        Self::new(1.0, rotation, translation)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn apply_all(&self, points: &[Vec3]) -> Vec<Vec3> {
        points.iter().map(|p| self.apply(p)).collect()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        let inv_scale = 1.0 / self.scale;
        Self { scale: inv_scale, rotation: rt, translation: -(inv_scale * (rt * self.translation)) }
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    /// Angle in radians of the relative rotation between `self` and `other`.
    pub fn rotation_angle_to(&self, other: &Self) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation))
    }

    /// Largest absolute difference over scale, rotation entries and translation.
    pub fn max_param_diff(&self, other: &Self) -> f64 {
        let ds = (self.scale - other.scale).abs();
        let dr = (self.rotation - other.rotation).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        ds.max(dr).max(dt)
    }

    pub fn to_record(&self, source_frame: &str, target_frame: &str) -> Sim3Record {
        let mut q = self.quaternion().into_inner();
        // q and -q encode the same rotation; emit the w >= 0 representative.
        if q.w < 0.0 {
            q = -q;
        }
        Sim3Record {
            scale: self.scale,
            rotation_quaternion_wxyz: [q.w, q.i, q.j, q.k],
            translation_m: [self.translation.x, self.translation.y, self.translation.z],
            source_frame: source_frame.to_string(),
            target_frame: target_frame.to_string(),
        }
    }
}

/// Angle in radians of a rotation matrix, robust near 0 and π.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let axis = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let trace = r.trace();
    axis.norm().atan2(trace - 1.0)
}

/// JSON interchange form of a [`Sim3Transform`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sim3Record {
    pub scale: f64,
    pub rotation_quaternion_wxyz: [f64; 4],
    pub translation_m: [f64; 3],
    #[serde(default)]
    pub source_frame: String,
    #[serde(default)]
    pub target_frame: String,
}

impl TryFrom<&Sim3Record> for Sim3Transform {
    type Error = GeometryError;

    fn try_from(rec: &Sim3Record) -> Result<Self, Self::Error> {
        let [w, x, y, z] = rec.rotation_quaternion_wxyz;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if !(q.norm() > 0.0) {
            return Err(GeometryError::InvalidTransform("zero quaternion".into()));
        }
        let [tx, ty, tz] = rec.translation_m;
        Sim3Transform::from_quaternion(rec.scale, UnitQuaternion::from_quaternion(q), Vec3::new(tx, ty, tz))
    }
}

/// Paired 3D points with optional nonnegative weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Correspondences3D {
    pub source: Vec<Vec3>,
    pub target: Vec<Vec3>,
    pub weights: Option<Vec<f64>>,
}

impl Correspondences3D {
    pub fn new(source: Vec<Vec3>, target: Vec<Vec3>) -> Result<Self, GeometryError> {
        Self::with_weights(source, target, None)
    }

    pub fn with_weights(source: Vec<Vec3>, target: Vec<Vec3>, weights: Option<Vec<f64>>) -> Result<Self, GeometryError> {
        if source.len() != target.len() {
            return Err(GeometryError::DegenerateInput(format!(
                "source has {} points but target has {}",
                source.len(),
                target.len()
            )));
        }
        if let Some(w) = &weights {
            if w.len() != source.len() {
                return Err(GeometryError::DegenerateInput("weights length differs from point count".into()));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(GeometryError::DegenerateInput("weights must be finite and nonnegative".into()));
            }
        }
        if source.iter().chain(target.iter()).any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(GeometryError::DegenerateInput("non-finite point".into()));
        }
        Ok(Self { source, target, weights })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn push(&mut self, source: Vec3, target: Vec3) {
        self.source.push(source);
        self.target.push(target);
        if let Some(w) = &mut self.weights {
            w.push(1.0);
        }
    }

    /// Appends `other`, dropping weights unless both sides carry them.
    pub fn extend_from(&mut self, other: &Correspondences3D) {
        self.source.extend_from_slice(&other.source);
        self.target.extend_from_slice(&other.target);
        self.weights = match (self.weights.take(), &other.weights) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            _ => None,
        };
    }

    pub fn select(&self, indices: &[usize]) -> Correspondences3D {
        Correspondences3D {
            source: indices.iter().map(|&i| self.source[i]).collect(),
            target: indices.iter().map(|&i| self.target[i]).collect(),
            weights: self.weights.as_ref().map(|w| indices.iter().map(|&i| w[i]).collect()),
        }
    }

    pub fn residual(&self, t: &Sim3Transform, i: usize) -> f64 {
        (t.apply(&self.source[i]) - self.target[i]).norm()
    }

    pub fn residuals(&self, t: &Sim3Transform) -> Vec<f64> {
        (0..self.len()).map(|i| self.residual(t, i)).collect()
    }
}

/// How the similarity scale is treated by [`weighted_alignment`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleMode {
    Estimate,
    Fixed(f64),
}

/// Kabsch-Umeyama least-squares similarity fit honouring optional weights.
pub fn umeyama(corr: &Correspondences3D) -> Result<Sim3Transform, GeometryError> {
    match &corr.weights {
        Some(w) => weighted_alignment(&corr.source, &corr.target, Some(w), ScaleMode::Estimate),
        None => weighted_alignment(&corr.source, &corr.target, None, ScaleMode::Estimate),
    }
}

/// Closed-form minimiser of `Σ wᵢ ‖s·R·srcᵢ + t − dstᵢ‖²` over proper rotations.
///
/// With `ScaleMode::Fixed` the scale is held and only `R`, `t` are solved
/// (the optimal rotation does not depend on the scale).
pub fn weighted_alignment(
    source: &[Vec3],
    target: &[Vec3],
    weights: Option<&[f64]>,
    scale_mode: ScaleMode,
) -> Result<Sim3Transform, GeometryError> {
    let n = source.len();
    if n != target.len() {
        return Err(GeometryError::DegenerateInput("source/target length mismatch".into()));
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    let support = (0..n).filter(|&i| weight(i) > 0.0).count();
    if support < 3 {
        return Err(GeometryError::DegenerateInput(format!("need at least 3 weighted correspondences, got {support}")));
    }
    let total: f64 = (0..n).map(weight).sum();

    let mut mu_s = Vec3::zeros();
    let mut mu_t = Vec3::zeros();
    for i in 0..n {
        let w = weight(i);
        mu_s += w * source[i];
        mu_t += w * target[i];
    }
    mu_s /= total;
    mu_t /= total;

    let mut scatter = Matrix3::zeros();
    let mut cross = Matrix3::zeros();
    for i in 0..n {
        let w = weight(i);
        if w == 0.0 {
            continue;
        }
        let ds = source[i] - mu_s;
        let dt = target[i] - mu_t;
        scatter += w * ds * ds.transpose();
        cross += w * dt * ds.transpose();
    }
    scatter /= total;
    cross /= total;

    let mut eig = SymmetricEigen::new(scatter).eigenvalues.iter().copied().collect::<Vec<_>>();
    eig.sort_by(|a, b| b.total_cmp(a));
    if !(eig[0] > 0.0) || eig[1] <= RANK_TOL * eig[0] {
        return Err(GeometryError::DegenerateInput("source points are collinear or coincident".into()));
    }
    let source_variance = scatter.trace();

    let svd = SVD::new(cross, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeometryError::DegenerateInput("SVD did not converge".into())),
    };
    // Singular values come sorted descending; flipping the last axis picks the
    // best proper rotation when the unconstrained optimum is a reflection.
    let d = if u.determinant() * v_t.determinant() < 0.0 { -1.0 } else { 1.0 };
    let s_diag = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let rotation = u * s_diag * v_t;

    let scale = match scale_mode {
        ScaleMode::Estimate => {
            let sv = svd.singular_values;
            (sv[0] + sv[1] + d * sv[2]) / source_variance
        }
        ScaleMode::Fixed(s) => s,
    };
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(GeometryError::DegenerateInput("target points coincide (zero scale)".into()));
    }
    let translation = mu_t - scale * (rotation * mu_s);
    Sim3Transform::new(scale, rotation, translation)
}

/// Counts correspondences with `‖T(sᵢ) − tᵢ‖ < threshold` (strict).
pub fn count_inliers(t: &Sim3Transform, corr: &Correspondences3D, threshold: f64) -> (usize, Vec<bool>) {
    let mask: Vec<bool> = (0..corr.len()).map(|i| corr.residual(t, i) < threshold).collect();
    (mask.iter().filter(|&&m| m).count(), mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub inlier_threshold: f64,
    pub max_iterations: usize,
    pub min_sample_size: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { inlier_threshold: 0.5, max_iterations: 2000, min_sample_size: 3, confidence: 0.999, seed: 0 }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.inlier_threshold > 0.0 && self.inlier_threshold.is_finite()) {
            return Err(GeometryError::InvalidConfig("inlier_threshold must be positive".into()));
        }
        if self.max_iterations < 1 {
            return Err(GeometryError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if self.min_sample_size < 3 {
            return Err(GeometryError::InvalidConfig("min_sample_size must be at least 3".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(GeometryError::InvalidConfig("confidence must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Iterations needed to reach `confidence` given the current inlier ratio.
    fn required_iterations(&self, inlier_ratio: f64) -> usize {
        let p_good = inlier_ratio.powi(self.min_sample_size as i32);
        if p_good >= 1.0 {
            return 1;
        }
        if p_good <= 0.0 {
            return self.max_iterations;
        }
        let n = (1.0 - self.confidence).ln() / (1.0 - p_good).ln();
        if n.is_finite() {
            (n.ceil() as usize).clamp(1, self.max_iterations)
        } else {
            self.max_iterations
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    pub transform: Sim3Transform,
    pub inlier_mask: Vec<bool>,
    pub inlier_count: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
struct Hypothesis {
    iteration: usize,
    count: usize,
    residual_sum: f64,
}

impl Hypothesis {
    fn beats(&self, other: &Hypothesis) -> bool {
        match self.count.cmp(&other.count) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => self.residual_sum < other.residual_sum,
        }
    }
}

/// Positions of `corr` sorted by the bit patterns of their coordinates, so
/// that sampling does not depend on the caller's ordering.
fn canonical_order(corr: &Correspondences3D) -> Vec<usize> {
    let mut order: Vec<usize> = (0..corr.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, ta) = (&corr.source[a], &corr.target[a]);
        let (sb, tb) = (&corr.source[b], &corr.target[b]);
        sa.iter()
            .chain(ta.iter())
            .zip(sb.iter().chain(tb.iter()))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    order
}

/// Sample positions (into the canonical order) for RANSAC iteration `iteration`.
///
/// Iteration `i` draws `m` distinct positions from `0..n` with a ChaCha8
/// generator seeded by `seed` on stream `i`, so any iteration can be
/// reproduced independently of the others and of the thread schedule.
pub fn ransac_sample(seed: u64, iteration: usize, n: usize, m: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rand::seq::index::sample(&mut rng, n, m).into_vec()
}

fn score(t: &Sim3Transform, corr: &Correspondences3D, order: &[usize], threshold: f64) -> (usize, f64) {
    let mut count = 0;
    let mut sum = 0.0;
    for &i in order {
        let r = corr.residual(t, i);
        if r < threshold {
            count += 1;
            sum += r;
        }
    }
    (count, sum)
}

/// Robust similarity estimation: minimal 3-point Umeyama hypotheses scored by
/// inlier count (ties broken by the smaller inlier residual sum), followed by
/// a single least-squares refit on the winning inlier set.
///
/// The iteration budget adapts to the best inlier ratio seen so far and is
/// capped at `cfg.max_iterations`. Hypotheses are evaluated in parallel
/// batches but reduced in iteration order, so results do not depend on the
/// number of worker threads or on the order of `corr`.
pub fn ransac_sim3(corr: &Correspondences3D, cfg: &RansacConfig) -> Result<RansacOutcome, GeometryError> {
    cfg.validate()?;
    let n = corr.len();
    if n < cfg.min_sample_size {
        return Err(GeometryError::DegenerateInput(format!(
            "need at least {} correspondences, got {n}",
            cfg.min_sample_size
        )));
    }
    let order = canonical_order(corr);
    let hypothesis = |iteration: usize| -> Option<(Hypothesis, Sim3Transform)> {
        let sample: Vec<usize> = ransac_sample(cfg.seed, iteration, n, cfg.min_sample_size)
            .into_iter()
            .map(|pos| order[pos])
            .collect();
        let src: Vec<Vec3> = sample.iter().map(|&i| corr.source[i]).collect();
        let dst: Vec<Vec3> = sample.iter().map(|&i| corr.target[i]).collect();
        let model = weighted_alignment(&src, &dst, None, ScaleMode::Estimate).ok()?;
        let (count, residual_sum) = score(&model, corr, &order, cfg.inlier_threshold);
        Some((Hypothesis { iteration, count, residual_sum }, model))
    };

    let mut best: Option<(Hypothesis, Sim3Transform)> = None;
    let mut budget = cfg.max_iterations;
    let mut next = 0;
    let mut iterations = 0;
    'outer: while next < budget {
        let end = (next + RANSAC_BATCH).min(budget);
        let batch: Vec<Option<(Hypothesis, Sim3Transform)>> = (next..end).into_par_iter().map(hypothesis).collect();
        for (offset, result) in batch.into_iter().enumerate() {
            let iteration = next + offset;
            if iteration >= budget {
                break 'outer;
            }
            iterations = iteration + 1;
            if let Some((h, model)) = result {
                if best.as_ref().is_none_or(|(b, _)| h.beats(b)) {
                    best = Some((h, model));
                    budget = budget.min(cfg.required_iterations(h.count as f64 / n as f64));
                }
            }
        }
        next = end;
    }

    let (hyp, model) = match best {
        Some(b) if b.0.count >= 3 => b,
        Some(b) => return Err(GeometryError::NoConsensus { best: b.0.count }),
        None => return Err(GeometryError::NoConsensus { best: 0 }),
    };
    debug_assert!(hyp.iteration < iterations);

    let inliers: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| corr.residual(&model, i) < cfg.inlier_threshold)
        .collect();
    let refit = weighted_alignment(
        &inliers.iter().map(|&i| corr.source[i]).collect::<Vec<_>>(),
        &inliers.iter().map(|&i| corr.target[i]).collect::<Vec<_>>(),
        None,
        ScaleMode::Estimate,
    )
    .unwrap_or(model);
    let (inlier_count, inlier_mask) = count_inliers(&refit, corr, cfg.inlier_threshold);
    Ok(RansacOutcome { transform: refit, inlier_mask, inlier_count, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn rot_z(deg: f64) -> Matrix3<f64> {
        *Rotation3::from_axis_angle(&Vec3::z_axis(), deg.to_radians()).matrix()
    }

    fn random_points(n: usize, seed: u64, half: f64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half)))
            .collect()
    }

    #[test]
    fn umeyama_identity_on_tetrahedron() {
        let pts = vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()];
        let t = umeyama(&Correspondences3D::new(pts.clone(), pts).unwrap()).unwrap();
        assert!(t.max_param_diff(&Sim3Transform::identity()) < 1e-12);
    }

    #[test]
    fn umeyama_recovers_known_similarity() {
        let truth = Sim3Transform::new(2.0, rot_z(90.0), Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let src = random_points(100, 7, 10.0);
        let dst = truth.apply_all(&src);
        let est = umeyama(&Correspondences3D::new(src, dst).unwrap()).unwrap();
        assert!(est.max_param_diff(&truth) < 1e-9, "{:?}", est);
    }

    #[test]
    fn umeyama_rejects_collinear_points() {
        let pts = vec![Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), Vec3::new(2.0, 2.0, 2.0)];
        let err = umeyama(&Correspondences3D::new(pts.clone(), pts).unwrap()).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateInput(_)));
    }

    #[test]
    fn umeyama_rejects_too_few_points() {
        let pts = vec![Vec3::zeros(), Vec3::x()];
        assert!(matches!(
            umeyama(&Correspondences3D::new(pts.clone(), pts).unwrap()),
            Err(GeometryError::DegenerateInput(_))
        ));
    }

    #[test]
    fn reflected_target_still_yields_proper_rotation() {
        let src = random_points(30, 3, 5.0);
        let dst: Vec<Vec3> = src.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
        let t = umeyama(&Correspondences3D::new(src, dst).unwrap()).unwrap();
        assert_abs_diff_eq!(t.rotation().determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn weights_zero_out_corrupted_points() {
        let truth = Sim3Transform::new(0.5, rot_z(-40.0), Vec3::new(4.0, 0.0, -1.0)).unwrap();
        let src = random_points(20, 11, 3.0);
        let mut dst = truth.apply_all(&src);
        dst[0] += Vec3::new(50.0, 0.0, 0.0);
        let mut w = vec![1.0; 20];
        w[0] = 0.0;
        let t = umeyama(&Correspondences3D::with_weights(src, dst, Some(w)).unwrap()).unwrap();
        assert!(t.max_param_diff(&truth) < 1e-10);
    }

    #[test]
    fn fixed_scale_alignment_keeps_scale() {
        let truth = Sim3Transform::new(3.0, rot_z(10.0), Vec3::new(0.0, 1.0, 0.0)).unwrap();
        let src = random_points(10, 5, 2.0);
        let dst = truth.apply_all(&src);
        let t = weighted_alignment(&src, &dst, None, ScaleMode::Fixed(3.0)).unwrap();
        assert_eq!(t.scale(), 3.0);
        assert!(t.max_param_diff(&truth) < 1e-10);
    }

    #[test]
    fn inverse_and_compose_round_trip() {
        let t = Sim3Transform::new(1.7, rot_z(33.0), Vec3::new(-3.0, 8.0, 1.5)).unwrap();
        let p = Vec3::new(0.3, -2.0, 9.0);
        assert!((t.inverse().apply(&t.apply(&p)) - p).norm() < 1e-9);
        let id = t.compose(&t.inverse());
        assert!(id.max_param_diff(&Sim3Transform::identity()) < 1e-12);
    }

    #[test]
    fn record_round_trip() {
        let t = Sim3Transform::new(1.25, rot_z(200.0), Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let rec = t.to_record("air", "geo");
        assert!(rec.rotation_quaternion_wxyz[0] >= 0.0);
        let json = serde_json::to_string(&rec).unwrap();
        let back: Sim3Record = serde_json::from_str(&json).unwrap();
        let t2 = Sim3Transform::try_from(&back).unwrap();
        assert!(t.max_param_diff(&t2) < 1e-12);
        assert_eq!(back.source_frame, "air");
    }

    #[test]
    fn new_rejects_bad_rotation() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = -1.0;
        assert!(Sim3Transform::new(1.0, m, Vec3::zeros()).is_err());
        assert!(Sim3Transform::new(0.0, Matrix3::identity(), Vec3::zeros()).is_err());
    }

    #[test]
    fn count_inliers_examples() {
        let pts = random_points(5, 1, 1.0);
        let corr = Correspondences3D::new(pts.clone(), pts.clone()).unwrap();
        assert_eq!(count_inliers(&Sim3Transform::identity(), &corr, 0.1).0, 5);
        let shifted: Vec<Vec3> = pts.iter().map(|p| p + Vec3::x()).collect();
        let corr = Correspondences3D::new(pts, shifted).unwrap();
        assert_eq!(count_inliers(&Sim3Transform::identity(), &corr, 0.5).0, 0);
    }

    fn contaminated(seed: u64) -> (Correspondences3D, Vec<bool>, Sim3Transform) {
        let truth = Sim3Transform::new(1.5, rot_z(30.0), Vec3::new(10.0, -5.0, 2.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut corr = Correspondences3D::default();
        let mut is_inlier = Vec::new();
        for i in 0..1000 {
            let s = Vec3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            if i % 10 < 7 {
                corr.push(s, truth.apply(&s));
                is_inlier.push(true);
            } else {
                let t = Vec3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
                corr.push(s, t);
                is_inlier.push(truth.apply(&s).metric_distance(&t) < 0.5);
            }
        }
        (corr, is_inlier, truth)
    }

    #[test]
    fn ransac_recovers_exact_inliers() {
        let (corr, is_inlier, truth) = contaminated(42);
        let out = ransac_sim3(&corr, &RansacConfig { seed: 9, ..Default::default() }).unwrap();
        assert!((out.transform.translation() - truth.translation()).norm() < 1e-6);
        assert_eq!(out.inlier_mask, is_inlier);
        let (count, mask) = count_inliers(&out.transform, &corr, 0.5);
        assert_eq!(count, is_inlier.iter().filter(|&&b| b).count());
        assert_eq!(mask, is_inlier);
    }

    #[test]
    fn ransac_fails_on_pure_noise() {
        let src = random_points(20, 100, 50.0);
        let dst = random_points(20, 200, 50.0);
        let corr = Correspondences3D::new(src, dst).unwrap();
        let cfg = RansacConfig { inlier_threshold: 1e-6, seed: 1, ..Default::default() };
        // Golden run: with seed 1 no hypothesis attains three inliers.
        assert_eq!(ransac_sim3(&corr, &cfg).unwrap_err(), GeometryError::NoConsensus { best: 0 });
    }

    #[test]
    fn ransac_is_independent_of_input_order() {
        let (corr, _, _) = contaminated(5);
        let cfg = RansacConfig { seed: 3, ..Default::default() };
        let a = ransac_sim3(&corr, &cfg).unwrap();
        let mut idx: Vec<usize> = (0..corr.len()).collect();
        idx.reverse();
        idx.rotate_left(137);
        let b = ransac_sim3(&corr.select(&idx), &cfg).unwrap();
        assert_eq!(a.transform, b.transform);
        let remapped: Vec<bool> = idx.iter().map(|&i| a.inlier_mask[i]).collect();
        assert_eq!(remapped, b.inlier_mask);
    }

    #[test]
    fn ransac_is_independent_of_thread_count() {
        let (corr, _, _) = contaminated(8);
        let cfg = RansacConfig { seed: 77, ..Default::default() };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| ransac_sim3(&corr, &cfg).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn sample_contract_is_per_iteration() {
        let a = ransac_sample(5, 17, 100, 3);
        assert_eq!(a, ransac_sample(5, 17, 100, 3));
        assert_ne!(a, ransac_sample(5, 18, 100, 3));
        let mut sorted = a.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 3);
    }

    #[test]
    fn ransac_config_validation() {
        assert!(RansacConfig { inlier_threshold: 0.0, ..Default::default() }.validate().is_err());
        assert!(RansacConfig { max_iterations: 0, ..Default::default() }.validate().is_err());
        assert!(RansacConfig { confidence: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn rotation_angle_matches_construction() {
        assert_abs_diff_eq!(rotation_angle(&rot_z(37.0)), 37f64.to_radians(), epsilon = 1e-12);
        assert_abs_diff_eq!(rotation_angle(&rot_z(180.0)), std::f64::consts::PI, epsilon = 1e-12);
    }
}
