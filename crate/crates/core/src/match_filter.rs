//! Cyclic-consistency filtering of dense forward/backward flows.
//!
//! A pixel `x` of image A is mapped into B by the forward flow, the backward
//! flow is sampled bilinearly at the landing point, and the residual is the
//! distance between where that lands in A and `x`.

use crate::raster_io::{NodataPolicy, Raster, RasterError, Semantic};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Nodata marker of residual rasters.
pub const RESIDUAL_NODATA: f32 = -1.0;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
    #[error("no matches survived filtering ({evaluated} pixels evaluated)")]
    EmptyResult { evaluated: usize },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {message}")]
    Csv { path: String, message: String },
}

/// Dense flows between images A and B plus their confidence maps.
#[derive(Debug, Clone)]
pub struct FlowPair {
    pub forward: Raster,
    pub backward: Raster,
    pub conf_forward: Raster,
    pub conf_backward: Raster,
    /// Reliability of the rendered image A, if it was rendered.
    pub model_confidence: Option<Raster>,
}

impl FlowPair {
    pub fn new(
        forward: Raster,
        backward: Raster,
        conf_forward: Raster,
        conf_backward: Raster,
        model_confidence: Option<Raster>,
    ) -> Result<Self, FilterError> {
        let fp = Self { forward, backward, conf_forward, conf_backward, model_confidence };
        fp.validate()?;
        Ok(fp)
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        let check = |r: &Raster, sem: Semantic, dims: (usize, usize), name: &str| {
            if r.semantic() != sem || r.channels() != sem.channels() {
                return Err(FilterError::ShapeMismatch(format!("{name} must be {sem:?}, got {:?}", r.semantic())));
            }
            if r.dims() != dims {
                return Err(FilterError::ShapeMismatch(format!("{name} is {:?}, expected {:?}", r.dims(), dims)));
            }
            Ok(())
        };
        let a = self.forward.dims();
        let b = self.backward.dims();
        check(&self.forward, Semantic::Flow2, a, "forward flow")?;
        check(&self.backward, Semantic::Flow2, b, "backward flow")?;
        check(&self.conf_forward, Semantic::Confidence1, a, "forward confidence")?;
        check(&self.conf_backward, Semantic::Confidence1, b, "backward confidence")?;
        if let Some(m) = &self.model_confidence {
            check(m, Semantic::Confidence1, a, "model confidence")?;
        }
        Ok(())
    }

    pub fn dims_a(&self) -> (usize, usize) {
        self.forward.dims()
    }

    pub fn dims_b(&self) -> (usize, usize) {
        self.backward.dims()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub cyclic_threshold_px: f64,
    pub min_confidence: f64,
    pub min_model_confidence: f64,
    pub max_matches: usize,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { cyclic_threshold_px: 2.0, min_confidence: 0.2, min_model_confidence: 0.5, max_matches: 5000, seed: 0 }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !(self.cyclic_threshold_px > 0.0 && self.cyclic_threshold_px.is_finite()) {
            return Err(FilterError::InvalidConfig(format!("cyclic_threshold_px must be > 0, got {}", self.cyclic_threshold_px)));
        }
        for (name, v) in [("min_confidence", self.min_confidence), ("min_model_confidence", self.min_model_confidence)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(FilterError::InvalidConfig(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.max_matches < 3 {
            return Err(FilterError::InvalidConfig(format!("max_matches must be >= 3, got {}", self.max_matches)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub row_a: f64,
    pub col_a: f64,
    pub row_b: f64,
    pub col_b: f64,
    pub residual_px: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub matches: Vec<Match>,
    /// Pixels that passed every gate, before subsampling.
    pub survivors: usize,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

/// Round trip of pixel `(row, col)` of A; `None` when either hop leaves the
/// image or hits nodata.
fn round_trip(fp: &FlowPair, row: usize, col: usize) -> Option<(f64, f64, f64)> {
    if fp.forward.pixel_is_nodata(row, col) {
        return None;
    }
    let f = fp.forward.pixel(row, col);
    let (col_b, row_b) = (f[0] as f64, f[1] as f64);
    let back = fp.backward.sample_bilinear(row_b, col_b, NodataPolicy::Strict).ok()?;
    let (col_a2, row_a2) = (back[0], back[1]);
    if !fp.forward.contains(row_a2, col_a2) {
        return None;
    }
    let residual = (row_a2 - row as f64).hypot(col_a2 - col as f64);
    Some((row_b, col_b, residual))
}

/// Per-pixel residuals on A in f64; `None` marks pixels without a valid round trip.
fn residual_field(fp: &FlowPair) -> Vec<Option<(f64, f64, f64)>> {
    let (h, w) = fp.dims_a();
    (0..h)
        .into_par_iter()
        .flat_map_iter(|row| (0..w).map(move |col| round_trip(fp, row, col)))
        .collect()
}

/// Cyclic residual raster on image A (pixels); nodata is [`RESIDUAL_NODATA`].
pub fn cyclic_residuals(fp: &FlowPair) -> Result<Raster, FilterError> {
    fp.validate()?;
    let (h, w) = fp.dims_a();
    let data = residual_field(fp)
        .into_iter()
        .map(|r| r.map_or(RESIDUAL_NODATA, |(_, _, res)| res as f32))
        .collect();
    Ok(Raster::new(h, w, Semantic::Confidence1, data, Some(RESIDUAL_NODATA))?)
}

fn gate_value(r: &Raster, row: usize, col: usize) -> Option<f64> {
    (!r.pixel_is_nodata(row, col)).then(|| r.get(row, col, 0) as f64)
}

/// Applies the cyclic, confidence and model-confidence gates and subsamples
/// the survivors uniformly without replacement.
pub fn filter_matches(fp: &FlowPair, cfg: &FilterConfig) -> Result<MatchSet, FilterError> {
    fp.validate()?;
    cfg.validate()?;
    let (h, w) = fp.dims_a();
    let field = residual_field(fp);
    let mut kept: Vec<Match> = field
        .into_iter()
        .enumerate()
        .filter_map(|(i, rt)| {
            let (row, col) = (i / w, i % w);
            let (row_b, col_b, residual) = rt?;
            if residual > cfg.cyclic_threshold_px {
                return None;
            }
            let confidence = gate_value(&fp.conf_forward, row, col)?;
            if confidence < cfg.min_confidence {
                return None;
            }
            if let Some(m) = &fp.model_confidence {
                if gate_value(m, row, col)? < cfg.min_model_confidence {
                    return None;
                }
            }
            Some(Match { row_a: row as f64, col_a: col as f64, row_b, col_b, residual_px: residual, confidence })
        })
        .collect();
    let survivors = kept.len();
    if survivors == 0 {
        return Err(FilterError::EmptyResult { evaluated: h * w });
    }
    if survivors > cfg.max_matches {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = rand::seq::index::sample(&mut rng, survivors, cfg.max_matches).into_vec();
        idx.sort_unstable();
        kept = idx.into_iter().map(|i| kept[i]).collect();
    }
    Ok(MatchSet { matches: kept, survivors })
}

const CSV_HEADER: [&str; 6] = ["row_a", "col_a", "row_b", "col_b", "residual_px", "confidence"];

pub fn write_matches_csv(set: &MatchSet, path: &Path) -> Result<(), FilterError> {
    let err = |e: csv::Error| FilterError::Csv { path: path.display().to_string(), message: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(CSV_HEADER).map_err(err)?;
    for m in &set.matches {
        let fields = [m.row_a, m.col_a, m.row_b, m.col_b, m.residual_px, m.confidence].map(|v| format!("{v:.6}"));
        w.write_record(&fields).map_err(err)?;
    }
    w.flush().map_err(|e| FilterError::Csv { path: path.display().to_string(), message: e.to_string() })
}

pub fn read_matches_csv(path: &Path) -> Result<MatchSet, FilterError> {
    let err = |message: String| FilterError::Csv { path: path.display().to_string(), message };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let header = r.headers().map_err(|e| err(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(err(format!("expected header {}", CSV_HEADER.join(","))));
    }
    let mut matches = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| err(format!("bad number {s:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if v.len() != 6 || v.iter().any(|x| !x.is_finite()) {
            return Err(err(format!("malformed record {rec:?}")));
        }
        matches.push(Match { row_a: v[0], col_a: v[1], row_b: v[2], col_b: v[3], residual_px: v[4], confidence: v[5] });
    }
    let survivors = matches.len();
    Ok(MatchSet { matches, survivors })
}

/// Flow whose every pixel maps to `(row + dr, col + dc)`.
pub fn shift_flow(height: usize, width: usize, dr: f32, dc: f32) -> Raster {
    Raster::from_fn(height, width, Semantic::Flow2, None, |r, c, px| {
        px[0] = c as f32 + dc;
        px[1] = r as f32 + dr;
    })
    .expect("finite shift flow")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(fwd: Raster, bwd: Raster, conf: f32) -> FlowPair {
        let (ha, wa) = fwd.dims();
        let (hb, wb) = bwd.dims();
        FlowPair::new(
            fwd,
            bwd,
            Raster::filled(ha, wa, Semantic::Confidence1, conf),
            Raster::filled(hb, wb, Semantic::Confidence1, conf),
            None,
        )
        .unwrap()
    }

    #[test]
    fn identity_flows_have_zero_residual() {
        let fp = pair(shift_flow(7, 9, 0.0, 0.0), shift_flow(7, 9, 0.0, 0.0), 1.0);
        let res = cyclic_residuals(&fp).unwrap();
        assert!(res.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inverse_shifts_cancel() {
        let fp = pair(shift_flow(10, 20, 0.0, 3.0), shift_flow(10, 20, 0.0, -3.0), 1.0);
        let res = cyclic_residuals(&fp).unwrap();
        for r in 0..10 {
            for c in 0..20 {
                let v = res.get(r, c, 0);
                if c + 3 <= 19 {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, RESIDUAL_NODATA);
                }
            }
        }
    }

    #[test]
    fn mismatched_shifts_leave_two_pixels() {
        let fp = pair(shift_flow(10, 20, 0.0, 3.0), shift_flow(10, 20, 0.0, -1.0), 1.0);
        let res = cyclic_residuals(&fp).unwrap();
        for r in 0..10 {
            for c in 0..17 {
                assert_eq!(res.get(r, c, 0), 2.0);
            }
        }
        let set = filter_matches(&fp, &FilterConfig::default()).unwrap();
        assert_eq!(set.survivors, 10 * 17);
        assert!(set.matches.iter().all(|m| m.residual_px == 2.0 && m.col_b == m.col_a + 3.0));
    }

    #[test]
    fn subsamples_to_max_matches() {
        let fp = pair(shift_flow(100, 100, 0.0, 0.0), shift_flow(100, 100, 0.0, 0.0), 1.0);
        let set = filter_matches(&fp, &FilterConfig::default()).unwrap();
        assert_eq!(set.len(), 5000);
        assert_eq!(set.survivors, 10_000);
        let again = filter_matches(&fp, &FilterConfig::default()).unwrap();
        assert_eq!(set, again);
        let other = filter_matches(&fp, &FilterConfig { seed: 9, ..Default::default() }).unwrap();
        assert_ne!(set.matches, other.matches);
        assert!(set.matches.windows(2).all(|w| (w[0].row_a, w[0].col_a) < (w[1].row_a, w[1].col_a)));
    }

    #[test]
    fn low_confidence_is_empty() {
        let fp = pair(shift_flow(5, 5, 0.0, 0.0), shift_flow(5, 5, 0.0, 0.0), 0.1);
        assert!(matches!(filter_matches(&fp, &FilterConfig::default()), Err(FilterError::EmptyResult { .. })));
    }

    #[test]
    fn confidence_gate_is_inclusive() {
        let fp = pair(shift_flow(4, 4, 0.0, 0.0), shift_flow(4, 4, 0.0, 0.0), 0.25);
        let cfg = FilterConfig { min_confidence: 0.25, ..Default::default() };
        assert_eq!(filter_matches(&fp, &cfg).unwrap().len(), 16);
    }

    #[test]
    fn model_confidence_gate() {
        let mut fp = pair(shift_flow(4, 4, 0.0, 0.0), shift_flow(4, 4, 0.0, 0.0), 1.0);
        fp.model_confidence =
            Some(Raster::from_fn(4, 4, Semantic::Confidence1, None, |_, c, px| px[0] = if c < 2 { 0.9 } else { 0.1 }).unwrap());
        let set = filter_matches(&fp, &FilterConfig::default()).unwrap();
        assert_eq!(set.len(), 8);
        assert!(set.matches.iter().all(|m| m.col_a < 2.0));
    }

    #[test]
    fn shape_mismatch_detected() {
        let r = FlowPair::new(
            shift_flow(4, 4, 0.0, 0.0),
            shift_flow(5, 5, 0.0, 0.0),
            Raster::filled(4, 5, Semantic::Confidence1, 1.0),
            Raster::filled(5, 5, Semantic::Confidence1, 1.0),
            None,
        );
        assert!(matches!(r, Err(FilterError::ShapeMismatch(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let fp = pair(shift_flow(6, 6, 0.5, 0.25), shift_flow(6, 6, -0.5, -0.25), 0.75);
        let set = filter_matches(&fp, &FilterConfig::default()).unwrap();
        write_matches_csv(&set, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("row_a,col_a,row_b,col_b,residual_px,confidence\n0.000000,0.000000,0.500000,0.250000,"));
        let back = read_matches_csv(&path).unwrap();
        assert_eq!(back.len(), set.len());
        for (a, b) in back.matches.iter().zip(&set.matches) {
            let (x, y) = ([a.row_a, a.col_a, a.row_b, a.col_b, a.residual_px, a.confidence], [b.row_a, b.col_a, b.row_b, b.col_b, b.residual_px, b.confidence]);
            assert!(x.iter().zip(&y).all(|(u, v)| (u - v).abs() <= 5e-7));
        }
    }

    fn smooth_pair(h: usize, w: usize, a: f64, b: f64) -> FlowPair {
        // Column shift a*sin(b*row), quantised to 1/256 px so that f32 storage
        // is exact and the backward map is the exact inverse.
        let shift = |r: usize| ((256.0 * a * (b * r as f64).sin()).round() / 256.0) as f32;
        let fwd = Raster::from_fn(h, w, Semantic::Flow2, None, |r, c, px| {
            px[0] = c as f32 + shift(r);
            px[1] = r as f32;
        })
        .unwrap();
        let bwd = Raster::from_fn(h, w, Semantic::Flow2, None, |r, c, px| {
            px[0] = c as f32 - shift(r);
            px[1] = r as f32;
        })
        .unwrap();
        pair(fwd, bwd, 1.0)
    }

    #[test]
    fn exact_inverse_flows_have_tiny_residual() {
        let fp = smooth_pair(40, 40, 0.75, 0.3);
        let res = cyclic_residuals(&fp).unwrap();
        for r in 0..40 {
            for c in 1..39 {
                assert!(res.get(r, c, 0).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn threshold_monotone(seed in 0u64..1000, t1 in 0.1f64..5.0, dt in 0.0f64..5.0) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fwd = Raster::from_fn(16, 16, Semantic::Flow2, None, |r, c, px| {
                px[0] = c as f32 + rng.random_range(-2.0..2.0);
                px[1] = r as f32 + rng.random_range(-2.0..2.0);
            }).unwrap();
            let fp = pair(fwd, shift_flow(16, 16, 0.0, 0.0), 1.0);
            let n = |t: f64| filter_matches(&fp, &FilterConfig { cyclic_threshold_px: t, ..Default::default() })
                .map(|s| s.survivors).unwrap_or(0);
            prop_assert!(n(t1) <= n(t1 + dt));
        }

        #[test]
        fn output_passes_all_gates(seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fwd = Raster::from_fn(12, 12, Semantic::Flow2, None, |r, c, px| {
                px[0] = c as f32 + rng.random_range(-3.0..3.0);
                px[1] = r as f32 + rng.random_range(-3.0..3.0);
            }).unwrap();
            let conf = Raster::from_fn(12, 12, Semantic::Confidence1, None, |_, _, px| px[0] = rng.random_range(0.0..1.0)).unwrap();
            let mut fp = pair(fwd, shift_flow(12, 12, 0.0, 0.0), 1.0);
            fp.conf_forward = conf;
            if let Ok(set) = filter_matches(&fp, &FilterConfig { max_matches: 40, ..Default::default() }) {
                for m in &set.matches {
                    let (r, c) = (m.row_a as usize, m.col_a as usize);
                    let f = fp.forward.pixel(r, c);
                    prop_assert_eq!((m.col_b, m.row_b), (f[0] as f64, f[1] as f64));
                    let back = fp.backward.sample_bilinear(m.row_b, m.col_b, NodataPolicy::Strict).unwrap();
                    let res = (back[0] - m.col_a).hypot(back[1] - m.row_a);
                    prop_assert!(res <= 2.0 && res == m.residual_px);
                    prop_assert!(fp.conf_forward.get(r, c, 0) as f64 >= 0.2);
                }
            }
        }
    }
}
