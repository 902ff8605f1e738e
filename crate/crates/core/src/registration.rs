//! Air-to-satellite and ground-to-air registration pipelines, render/tiling
//! plans and the subgraph acceptance gate.

use crate::geometry::{
    count_inliers, ransac_sim3, umeyama, Correspondences3D, GeometryError, RansacConfig, Sim3Record, Sim3Transform, Vec3,
};
use crate::gravity::CameraPose;
use crate::lifting::{lift_xyz_to_dsm, lift_xyz_to_xyz, LiftError, PixelPair};
use crate::match_filter::{filter_matches, FilterConfig, FilterError, FlowPair};
use crate::raster_io::{read_json, read_raster, GeoTransform, Raster, RasterError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("match_filter: {0}")]
    Filter(#[from] FilterError),
    #[error("lifting: {0}")]
    Lift(#[from] LiftError),
    #[error("ransac: {0}")]
    Ransac(#[from] GeometryError),
    #[error("no (ground image, tile) pair produced 3 or more correspondences")]
    NoCandidates,
    #[error("no candidate reached 3 pooled inliers (best {best})")]
    NoConsensus { best: usize },
    #[error("loading pair {key}: {source}")]
    Load {
        key: String,
        #[source]
        source: RasterError,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl RegistrationError {
    /// Pipeline stage the error is attributed to.
    pub fn stage(&self) -> &'static str {
        match self {
            Self::Filter(_) => "match_filter",
            Self::Lift(_) => "lifting",
            Self::Ransac(_) => "ransac",
            Self::NoCandidates | Self::NoConsensus { .. } => "consensus",
            Self::Load { .. } => "io",
            Self::InvalidConfig(_) => "config",
        }
    }

    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Filter(FilterError::EmptyResult { .. }) | Self::Lift(LiftError::EmptyResult { .. }) => "EmptyResult",
            Self::Filter(FilterError::ShapeMismatch(_)) => "ShapeMismatch",
            Self::Filter(_) | Self::Lift(_) => "InvalidInput",
            Self::Ransac(GeometryError::NoConsensus { .. }) | Self::NoConsensus { .. } => "NoConsensus",
            Self::Ransac(GeometryError::DegenerateInput(_)) => "DegenerateInput",
            Self::Ransac(_) => "InvalidInput",
            Self::NoCandidates => "NoCandidates",
            Self::Load { .. } => "IoError",
            Self::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

// ---------------------------------------------------------------------------
// Tiling

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Tile {
    pub render_id: u32,
    pub row_offset: usize,
    pub col_offset: usize,
    pub height: usize,
    pub width: usize,
}

impl Tile {
    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        (self.row_offset..self.row_offset + self.height).contains(&row)
            && (self.col_offset..self.col_offset + self.width).contains(&col)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub image_height: usize,
    pub image_width: usize,
    pub tile_size: usize,
    pub overlap_fraction: f64,
    pub tiles: Vec<Tile>,
}

fn axis_offsets(dim: usize, tile: usize, stride: usize) -> (Vec<usize>, usize) {
    if tile >= dim {
        return (vec![0], dim);
    }
    let mut offsets: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o + tile <= dim).collect();
    let last = *offsets.last().expect("first offset always fits");
    if last + tile < dim {
        offsets.push(dim - tile);
    }
    (offsets, tile)
}

/// Row-major tile grid of one render. The stride is
/// `round(tile_size * (1 - overlap))`, and a final tile is aligned to the
/// image edge whenever the regular tiles stop short of it.
pub fn make_tile_grid(
    image_height: usize,
    image_width: usize,
    tile_size: usize,
    overlap_fraction: f64,
) -> Result<TileGrid, RegistrationError> {
    tile_grid_for_render(0, image_height, image_width, tile_size, overlap_fraction)
}

pub fn tile_grid_for_render(
    render_id: u32,
    image_height: usize,
    image_width: usize,
    tile_size: usize,
    overlap_fraction: f64,
) -> Result<TileGrid, RegistrationError> {
    if image_height == 0 || image_width == 0 || tile_size == 0 {
        return Err(RegistrationError::InvalidConfig("image and tile sizes must be positive".into()));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(RegistrationError::InvalidConfig(format!("overlap_fraction must be in [0, 1), got {overlap_fraction}")));
    }
    let stride = ((tile_size as f64 * (1.0 - overlap_fraction)).round() as usize).max(1);
    let (rows, th) = axis_offsets(image_height, tile_size, stride);
    let (cols, tw) = axis_offsets(image_width, tile_size, stride);
    let tiles = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| Tile { render_id, row_offset: r, col_offset: c, height: th, width: tw }))
        .collect();
    Ok(TileGrid { image_height, image_width, tile_size, overlap_fraction, tiles })
}

/// Tiles of every render in `render_ids`, concatenated.
pub fn plan_tiles(
    render_ids: &[u32],
    image_height: usize,
    image_width: usize,
    tile_size: usize,
    overlap_fraction: f64,
) -> Result<Vec<Tile>, RegistrationError> {
    let mut all = Vec::new();
    for &id in render_ids {
        all.extend(tile_grid_for_render(id, image_height, image_width, tile_size, overlap_fraction)?.tiles);
    }
    Ok(all)
}

// ---------------------------------------------------------------------------
// Oblique render poses

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObliqueViewConfig {
    pub count: usize,
    pub azimuth_step_deg: f64,
    pub depression_deg: f64,
    pub resolution_px: usize,
    pub include_nadir: bool,
}

impl Default for ObliqueViewConfig {
    fn default() -> Self {
        Self { count: 8, azimuth_step_deg: 45.0, depression_deg: 45.0, resolution_px: 2048, include_nadir: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Projection {
    Orthographic { half_extent_m: f64 },
    Perspective { fov_deg: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderPose {
    pub render_id: u32,
    pub azimuth_deg: Option<f64>,
    pub pose: CameraPose,
    pub projection: Projection,
    pub resolution_px: usize,
}

/// JSON pose-spec entry consumed by an external renderer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderPoseRecord {
    pub render_id: u32,
    pub center_xyz: [f64; 3],
    pub rotation_quaternion_wxyz: [f64; 4],
    pub projection: Projection,
    pub resolution_px: usize,
}

impl RenderPose {
    pub fn to_record(&self) -> RenderPoseRecord {
        let cam = self.pose.to_record();
        RenderPoseRecord {
            render_id: self.render_id,
            center_xyz: cam.center_xyz,
            rotation_quaternion_wxyz: cam.rotation_quaternion_wxyz,
            projection: self.projection,
            resolution_px: self.resolution_px,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObliqueViewSet {
    pub config: ObliqueViewConfig,
    pub poses: Vec<RenderPose>,
}

/// Render poses on a circle of horizontal radius `scene_radius` around the
/// scene centre, azimuths clockwise from north (+y), each looking at the
/// centre at the configured depression. A depression of 90 degrees or more
/// puts the camera directly above the centre at height `scene_radius`.
/// The optional nadir pose gets the next render id.
pub fn oblique_poses(scene_center: &Vec3, scene_radius: f64, cfg: &ObliqueViewConfig) -> Result<ObliqueViewSet, RegistrationError> {
    if !(scene_radius > 0.0 && scene_radius.is_finite()) {
        return Err(RegistrationError::InvalidConfig(format!("scene radius must be positive, got {scene_radius}")));
    }
    if !(cfg.depression_deg > 0.0) {
        return Err(RegistrationError::InvalidConfig("depression must be positive".into()));
    }
    let projection = Projection::Orthographic { half_extent_m: scene_radius };
    let above = |id: u32| RenderPose {
        render_id: id,
        azimuth_deg: None,
        pose: CameraPose::look_at(format!("render_{id}"), scene_center + Vec3::new(0.0, 0.0, scene_radius), *scene_center),
        projection,
        resolution_px: cfg.resolution_px,
    };
    let mut poses = Vec::new();
    for i in 0..cfg.count {
        let id = i as u32;
        if cfg.depression_deg >= 90.0 {
            poses.push(RenderPose { azimuth_deg: Some(i as f64 * cfg.azimuth_step_deg), ..above(id) });
            continue;
        }
        let az_deg = i as f64 * cfg.azimuth_step_deg;
        let (s, c) = az_deg.to_radians().sin_cos();
        let height = scene_radius * cfg.depression_deg.to_radians().tan();
        let center = scene_center + Vec3::new(scene_radius * s, scene_radius * c, height);
        poses.push(RenderPose {
            render_id: id,
            azimuth_deg: Some(az_deg),
            pose: CameraPose::look_at(format!("render_{id}"), center, *scene_center),
            projection,
            resolution_px: cfg.resolution_px,
        });
    }
    if cfg.include_nadir {
        poses.push(above(cfg.count as u32));
    }
    Ok(ObliqueViewSet { config: *cfg, poses })
}

// ---------------------------------------------------------------------------
// Air to satellite

#[derive(Debug, Clone, PartialEq)]
pub struct AirToSatResult {
    pub transform: Sim3Transform,
    /// Cyclically consistent matches before subsampling.
    pub survivors: usize,
    pub matches_used: usize,
    pub lifted: usize,
    pub dropped: usize,
    pub inlier_count: usize,
    pub inlier_fraction: f64,
    pub ransac_iterations: usize,
    pub correspondences: Correspondences3D,
    /// Image-A and DSM pixel of each correspondence.
    pub provenance: Vec<PixelPair>,
    pub inlier_mask: Vec<bool>,
}

/// Default airborne-stage inlier threshold, in DSM pixels. Sub-pixel flow
/// error moves a lifted point by about one DSM pixel horizontally, so a
/// threshold at that scale truncates the inlier residuals.
pub const AIR_SAT_THRESHOLD_PX: f64 = 4.0;

/// RANSAC defaults for [`register_air_to_sat`] against a DSM with `geo`.
pub fn air_sat_ransac_config(geo: &GeoTransform) -> RansacConfig {
    RansacConfig { inlier_threshold: AIR_SAT_THRESHOLD_PX * geo.ground_sample_distance(), ..Default::default() }
}

/// Filter -> lift against the DSM -> RANSAC Sim(3). The result maps the
/// airborne model frame into the DSM's local metric frame.
pub fn register_air_to_sat(
    flow: &FlowPair,
    xyz_air: &Raster,
    dsm: &Raster,
    geo: &GeoTransform,
    filter_cfg: &FilterConfig,
    ransac_cfg: &RansacConfig,
) -> Result<AirToSatResult, RegistrationError> {
    let matches = filter_matches(flow, filter_cfg)?;
    let lifted = lift_xyz_to_dsm(&matches, xyz_air, dsm, geo)?;
    let outcome = ransac_sim3(&lifted.corr, ransac_cfg)?;
    Ok(AirToSatResult {
        transform: outcome.transform,
        survivors: matches.survivors,
        matches_used: matches.len(),
        lifted: lifted.len(),
        dropped: lifted.dropped_count,
        inlier_count: outcome.inlier_count,
        inlier_fraction: outcome.inlier_count as f64 / lifted.len() as f64,
        ransac_iterations: outcome.iterations,
        correspondences: lifted.corr,
        provenance: lifted.provenance,
        inlier_mask: outcome.inlier_mask,
    })
}

// ---------------------------------------------------------------------------
// Ground to air

/// A ground image matched against one airborne tile.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairKey {
    pub ground_image: String,
    pub tile: Tile,
}

impl std::fmt::Display for PairKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@render{}:{}x{}", self.ground_image, self.tile.render_id, self.tile.row_offset, self.tile.col_offset)
    }
}

/// Inputs of one pair: flows from the ground image (A) to the tile (B) and
/// the coordinate rasters of both sides.
#[derive(Debug, Clone)]
pub struct PairData {
    pub flow: FlowPair,
    pub xyz_ground: Arc<Raster>,
    pub xyz_tile: Arc<Raster>,
}

/// Lazily provides pair inputs so that only a few pairs are in memory at once.
pub trait PairSource: Sync {
    fn keys(&self) -> Vec<PairKey>;
    fn load(&self, key: &PairKey) -> Result<PairData, RegistrationError>;
}

/// A [`PairSource`] over pairs already in memory.
#[derive(Debug, Clone, Default)]
pub struct InMemoryPairs {
    pub pairs: Vec<(PairKey, PairData)>,
}

impl PairSource for InMemoryPairs {
    fn keys(&self) -> Vec<PairKey> {
        self.pairs.iter().map(|(k, _)| k.clone()).collect()
    }

    fn load(&self, key: &PairKey) -> Result<PairData, RegistrationError> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, d)| d.clone())
            .ok_or_else(|| RegistrationError::InvalidConfig(format!("unknown pair {key}")))
    }
}

/// One entry of a `pairs.json` manifest. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFiles {
    pub ground_image: String,
    pub tile: Tile,
    pub flow_fwd: PathBuf,
    pub flow_bwd: PathBuf,
    pub conf_fwd: PathBuf,
    pub conf_bwd: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_conf: Option<PathBuf>,
    pub xyz_ground: PathBuf,
    pub xyz_tile: PathBuf,
}

impl PairFiles {
    pub fn key(&self) -> PairKey {
        PairKey { ground_image: self.ground_image.clone(), tile: self.tile }
    }

    fn paths(&self) -> impl Iterator<Item = &PathBuf> {
        [&self.flow_fwd, &self.flow_bwd, &self.conf_fwd, &self.conf_bwd, &self.xyz_ground, &self.xyz_tile]
            .into_iter()
            .chain(self.model_conf.as_ref())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub pairs: Vec<PairFiles>,
}

/// A [`PairSource`] reading GRR1 rasters listed in a `pairs.json` manifest.
#[derive(Debug, Clone)]
pub struct FilePairs {
    root: PathBuf,
    entries: BTreeMap<PairKey, PairFiles>,
}

impl FilePairs {
    pub fn open(manifest: &Path) -> Result<Self, RasterError> {
        let m: PairManifest = read_json(manifest)?;
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = BTreeMap::new();
        for p in m.pairs {
            if entries.insert(p.key(), p.clone()).is_some() {
                return Err(RasterError::InvalidValue(format!("{}: duplicate pair {}", manifest.display(), p.key())));
            }
        }
        Ok(Self { root, entries })
    }

    /// Every raster the manifest references, sorted and deduplicated.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let mut files: Vec<PathBuf> = self.entries.values().flat_map(|p| p.paths().map(|f| self.root.join(f))).collect();
        files.sort();
        files.dedup();
        files
    }
}

impl PairSource for FilePairs {
    fn keys(&self) -> Vec<PairKey> {
        self.entries.keys().cloned().collect()
    }

    fn load(&self, key: &PairKey) -> Result<PairData, RegistrationError> {
        let p = self.entries.get(key).ok_or_else(|| RegistrationError::InvalidConfig(format!("unknown pair {key}")))?;
        let wrap = |source| RegistrationError::Load { key: key.to_string(), source };
        let read = |f: &PathBuf| read_raster(&self.root.join(f)).map_err(wrap);
        let flow = FlowPair {
            forward: read(&p.flow_fwd)?,
            backward: read(&p.flow_bwd)?,
            conf_forward: read(&p.conf_fwd)?,
            conf_backward: read(&p.conf_bwd)?,
            model_confidence: p.model_conf.as_ref().map(read).transpose()?,
        };
        Ok(PairData { flow, xyz_ground: Arc::new(read(&p.xyz_ground)?), xyz_tile: Arc::new(read(&p.xyz_tile)?) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundToAirConfig {
    pub top_k: usize,
    pub inlier_threshold_m: f64,
    pub filter: FilterConfig,
    pub ransac: RansacConfig,
}

impl Default for GroundToAirConfig {
    fn default() -> Self {
        Self { top_k: 5, inlier_threshold_m: 0.5, filter: FilterConfig::default(), ransac: RansacConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTransform {
    pub ground_image: String,
    pub source_tile: Tile,
    pub match_count: usize,
    pub correspondences: usize,
    pub ransac_inliers: usize,
    pub pooled_inlier_count: usize,
    pub pooled_residual_sum: f64,
    /// Pooled inliers over all pooled correspondences.
    pub inlier_fraction: f64,
    pub transform: Sim3Record,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub key: PairKey,
    pub match_count: usize,
    pub correspondences: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundToAirResult {
    pub transform: Sim3Transform,
    pub candidates: Vec<CandidateTransform>,
    pub winner: usize,
    pub pooled_count: usize,
    pub final_inlier_count: usize,
    pub final_inlier_fraction: f64,
    pub pairs: Vec<PairSummary>,
}

/// Audit record written next to the ground-to-air transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLedger {
    pub winner: usize,
    pub pooled_count: usize,
    pub final_inlier_count: usize,
    pub final_inlier_fraction: f64,
    pub candidates: Vec<CandidateTransform>,
    pub pairs: Vec<PairSummary>,
}

impl GroundToAirResult {
    pub fn ledger(&self) -> CandidateLedger {
        CandidateLedger {
            winner: self.winner,
            pooled_count: self.pooled_count,
            final_inlier_count: self.final_inlier_count,
            final_inlier_fraction: self.final_inlier_fraction,
            candidates: self.candidates.clone(),
            pairs: self.pairs.clone(),
        }
    }
}

struct PairOutcome {
    key: PairKey,
    match_count: usize,
    corr: Correspondences3D,
}

fn evaluate_pair(source: &dyn PairSource, key: &PairKey, cfg: &GroundToAirConfig) -> Result<PairOutcome, RegistrationError> {
    let data = source.load(key)?;
    let empty = |match_count| PairOutcome { key: key.clone(), match_count, corr: Correspondences3D::default() };
    let matches = match filter_matches(&data.flow, &cfg.filter) {
        Ok(m) => m,
        Err(FilterError::EmptyResult { .. }) => return Ok(empty(0)),
        Err(e) => return Err(e.into()),
    };
    match lift_xyz_to_xyz(&matches, &data.xyz_ground, &data.xyz_tile) {
        Ok(l) => Ok(PairOutcome { key: key.clone(), match_count: matches.survivors, corr: l.corr }),
        Err(LiftError::EmptyResult { .. }) => Ok(empty(matches.survivors)),
        Err(e) => Err(e.into()),
    }
}

/// Exhaustive ground-to-air matching with pooled consensus.
///
/// 1. Every (ground image, tile) pair is filtered and lifted.
/// 2. For each ground image, its `top_k` tiles by cyclically consistent match
///    count (ties by tile id) each get a RANSAC Sim(3) fit.
/// 3. Every candidate is scored by its inliers among the correspondences
///    pooled from all pairs; ties go to the smaller inlier residual sum.
/// 4. The winner is refit by least squares on its pooled inliers.
///
/// Pairs are processed in sorted key order, so the result does not depend on
/// the order in which `source` enumerates them.
pub fn register_ground_to_air(source: &dyn PairSource, cfg: &GroundToAirConfig) -> Result<GroundToAirResult, RegistrationError> {
    cfg.filter.validate()?;
    cfg.ransac.validate()?;
    if cfg.top_k == 0 || !(cfg.inlier_threshold_m > 0.0) {
        return Err(RegistrationError::InvalidConfig("top_k and inlier_threshold_m must be positive".into()));
    }
    let mut keys = source.keys();
    keys.sort();
    keys.dedup();
    let outcomes: Vec<PairOutcome> =
        keys.par_iter().map(|k| evaluate_pair(source, k, cfg)).collect::<Result<_, RegistrationError>>()?;

    let mut pooled = Correspondences3D::default();
    for o in &outcomes {
        pooled.extend_from(&o.corr);
    }

    let mut per_image: Vec<Vec<&PairOutcome>> = Vec::new();
    for o in &outcomes {
        match per_image.last_mut() {
            Some(group) if group[0].key.ground_image == o.key.ground_image => group.push(o),
            _ => per_image.push(vec![o]),
        }
    }
    let mut selected: Vec<&PairOutcome> = Vec::new();
    for group in &mut per_image {
        group.retain(|o| o.corr.len() >= 3);
        group.sort_by(|a, b| b.match_count.cmp(&a.match_count).then_with(|| a.key.cmp(&b.key)));
        selected.extend(group.iter().take(cfg.top_k));
    }
    if selected.is_empty() {
        return Err(RegistrationError::NoCandidates);
    }

    let ransac = RansacConfig { inlier_threshold: cfg.inlier_threshold_m, ..cfg.ransac };
    let fitted: Vec<Option<(usize, &PairOutcome, Sim3Transform, usize)>> = selected
        .par_iter()
        .enumerate()
        .map(|(i, o)| ransac_sim3(&o.corr, &ransac).ok().map(|r| (i, *o, r.transform, r.inlier_count)))
        .collect();
    let mut candidates = Vec::new();
    let mut models = Vec::new();
    for (_, o, t, ransac_inliers) in fitted.into_iter().flatten() {
        let (count, mask) = count_inliers(&t, &pooled, cfg.inlier_threshold_m);
        let residual_sum: f64 = (0..pooled.len()).filter(|&i| mask[i]).map(|i| pooled.residual(&t, i)).sum();
        candidates.push(CandidateTransform {
            ground_image: o.key.ground_image.clone(),
            source_tile: o.key.tile,
            match_count: o.match_count,
            correspondences: o.corr.len(),
            ransac_inliers,
            pooled_inlier_count: count,
            pooled_residual_sum: residual_sum,
            inlier_fraction: count as f64 / pooled.len() as f64,
            transform: t.to_record("ground", "air"),
        });
        models.push((t, mask));
    }
    let winner = (0..candidates.len()).min_by(|&a, &b| {
        let (ca, cb) = (&candidates[a], &candidates[b]);
        cb.pooled_inlier_count
            .cmp(&ca.pooled_inlier_count)
            .then_with(|| ca.pooled_residual_sum.partial_cmp(&cb.pooled_residual_sum).unwrap_or(Ordering::Equal))
            .then_with(|| a.cmp(&b))
    });
    let Some(winner) = winner else {
        return Err(RegistrationError::NoConsensus { best: 0 });
    };
    let best = candidates[winner].pooled_inlier_count;
    if best < 3 {
        return Err(RegistrationError::NoConsensus { best });
    }
    let inlier_idx: Vec<usize> = (0..pooled.len()).filter(|&i| models[winner].1[i]).collect();
    let transform = umeyama(&pooled.select(&inlier_idx)).unwrap_or(models[winner].0);
    let (final_inlier_count, _) = count_inliers(&transform, &pooled, cfg.inlier_threshold_m);
    let pairs = outcomes
        .iter()
        .map(|o| PairSummary { key: o.key.clone(), match_count: o.match_count, correspondences: o.corr.len() })
        .collect();
    Ok(GroundToAirResult {
        transform,
        winner,
        pooled_count: pooled.len(),
        final_inlier_count,
        final_inlier_fraction: final_inlier_count as f64 / pooled.len() as f64,
        candidates,
        pairs,
    })
}

// ---------------------------------------------------------------------------
// Subgraph gate

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubgraphGateConfig {
    pub min_cameras: usize,
    pub min_inlier_fraction: f64,
}

impl Default for SubgraphGateConfig {
    fn default() -> Self {
        Self { min_cameras: 9, min_inlier_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "reason", rename_all = "snake_case")]
pub enum GateDecision {
    Accept,
    Reject(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooFewCameras,
    LowInlierFraction,
}

/// Both thresholds are inclusive. Camera count is checked first.
pub fn gate_subgraph(camera_count: usize, inlier_fraction: f64, cfg: &SubgraphGateConfig) -> GateDecision {
    if camera_count < cfg.min_cameras {
        GateDecision::Reject(RejectReason::TooFewCameras)
    } else if !(inlier_fraction >= cfg.min_inlier_fraction) {
        GateDecision::Reject(RejectReason::LowInlierFraction)
    } else {
        GateDecision::Accept
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::match_filter::shift_flow;
    use crate::raster_io::Semantic;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn tile_grid_examples() {
        let g = make_tile_grid(2048, 2048, 300, 0.25).unwrap();
        assert_eq!(g.tiles.len(), 81);
        let offs: Vec<usize> = g.tiles.iter().take(9).map(|t| t.col_offset).collect();
        assert_eq!(offs, vec![0, 225, 450, 675, 900, 1125, 1350, 1575, 1748]);
        assert_eq!(plan_tiles(&(0..9).collect::<Vec<_>>(), 2048, 2048, 300, 0.25).unwrap().len(), 729);
        let single = make_tile_grid(100, 100, 300, 0.25).unwrap();
        assert_eq!(single.tiles, vec![Tile { render_id: 0, row_offset: 0, col_offset: 0, height: 100, width: 100 }]);
        assert_eq!(make_tile_grid(600, 300, 300, 0.0).unwrap().tiles.len(), 2);
        assert!(make_tile_grid(600, 300, 300, 1.0).is_err());
    }

    #[test]
    fn oblique_examples() {
        let set = oblique_poses(&Vec3::zeros(), 100.0, &ObliqueViewConfig::default()).unwrap();
        assert_eq!(set.poses.len(), 9);
        for (i, p) in set.poses.iter().take(8).enumerate() {
            let c = p.pose.center;
            assert_abs_diff_eq!(c.z, 100.0, epsilon = 1e-9);
            assert_abs_diff_eq!(c.x.hypot(c.y), 100.0, epsilon = 1e-9);
            assert_eq!(p.azimuth_deg, Some(45.0 * i as f64));
            // Looking at the centre, 45 degrees below the horizon.
            let f = p.pose.forward();
            assert_abs_diff_eq!(f, -c.normalize(), epsilon = 1e-12);
            assert_abs_diff_eq!(p.pose.orientation.determinant(), 1.0, epsilon = 1e-12);
        }
        let (a, b) = (set.poses[0].pose.center, set.poses[4].pose.center);
        assert_abs_diff_eq!(a.x, -b.x, epsilon = 1e-9);
        assert_abs_diff_eq!(a.y, -b.y, epsilon = 1e-9);
        assert_abs_diff_eq!(a.z, b.z, epsilon = 1e-9);
        let nadir = &set.poses[8];
        assert_eq!(nadir.pose.center, Vec3::new(0.0, 0.0, 100.0));
        assert_eq!(nadir.pose.forward(), -Vec3::z());

        let straight = ObliqueViewConfig { depression_deg: 90.0, include_nadir: false, ..Default::default() };
        let s = oblique_poses(&Vec3::new(1.0, 2.0, 3.0), 50.0, &straight).unwrap();
        assert!(s.poses.iter().all(|p| p.pose.center == Vec3::new(1.0, 2.0, 53.0)));
    }

    #[test]
    fn pose_record_json() {
        let set = oblique_poses(&Vec3::zeros(), 10.0, &ObliqueViewConfig::default()).unwrap();
        let json = serde_json::to_value(set.poses[0].to_record()).unwrap();
        assert_eq!(json["projection"]["type"], "orthographic");
        assert_eq!(json["projection"]["half_extent_m"], 10.0);
        assert_eq!(json["resolution_px"], 2048);
    }

    #[test]
    fn gate_examples() {
        let cfg = SubgraphGateConfig::default();
        assert_eq!(gate_subgraph(9, 0.20, &cfg), GateDecision::Accept);
        assert_eq!(gate_subgraph(8, 0.9, &cfg), GateDecision::Reject(RejectReason::TooFewCameras));
        assert_eq!(gate_subgraph(50, 0.19, &cfg), GateDecision::Reject(RejectReason::LowInlierFraction));
        assert_eq!(
            serde_json::to_string(&gate_subgraph(8, 0.9, &cfg)).unwrap(),
            r#"{"decision":"reject","reason":"too_few_cameras"}"#
        );
    }

    fn flow_pair(n: usize, conf: f32) -> FlowPair {
        FlowPair::new(
            shift_flow(n, n, 0.0, 0.0),
            shift_flow(n, n, 0.0, 0.0),
            Raster::filled(n, n, Semantic::Confidence1, conf),
            Raster::filled(n, n, Semantic::Confidence1, conf),
            None,
        )
        .unwrap()
    }

    #[test]
    fn air_to_sat_low_confidence_is_attributed() {
        let xyz = Raster::filled(8, 8, Semantic::Xyz3, 1.0);
        let dsm = Raster::filled(8, 8, Semantic::Dsm1, 1.0);
        let geo = GeoTransform {
            origin_easting: 0.0,
            origin_northing: 8.0,
            pixel_size_x: 1.0,
            pixel_size_y: -1.0,
            crs_label: String::new(),
            geodetic_anchor: crate::geodesy_metrics::GeodeticPoint { lat_deg: 0.0, lon_deg: 0.0, alt_m: 0.0 },
        };
        let err = register_air_to_sat(&flow_pair(8, 0.05), &xyz, &dsm, &geo, &FilterConfig::default(), &RansacConfig::default())
            .unwrap_err();
        assert_eq!((err.stage(), err.code()), ("match_filter", "EmptyResult"));
    }

    fn ramp_xyz(n: usize, t: &Sim3Transform) -> Raster {
        Raster::from_fn(n, n, Semantic::Xyz3, None, |r, c, px| {
            let p = t.apply(&Vec3::new(c as f64, r as f64, ((r * 7 + c * 3) % 5) as f64));
            px.copy_from_slice(&[p.x as f32, p.y as f32, p.z as f32]);
        })
        .unwrap()
    }

    #[test]
    fn ground_to_air_picks_consistent_tile() {
        let truth = Sim3Transform::new(
            1.0,
            *nalgebra::Rotation3::from_axis_angle(&Vec3::z_axis(), 0.5).matrix(),
            Vec3::new(4.0, -2.0, 1.0),
        )
        .unwrap();
        let n = 12;
        let ground = Arc::new(ramp_xyz(n, &Sim3Transform::identity()));
        let good = Arc::new(ramp_xyz(n, &truth));
        let decoy = Sim3Transform::new(1.0, nalgebra::Matrix3::identity(), Vec3::new(30.0, 0.0, 0.0)).unwrap();
        let mut src = InMemoryPairs::default();
        for (i, xyz) in [(0u32, good.clone()), (1, Arc::new(ramp_xyz(n, &decoy)))] {
            let key = PairKey {
                ground_image: "g0".into(),
                tile: Tile { render_id: i, row_offset: 0, col_offset: 0, height: n, width: n },
            };
            let mut flow = flow_pair(n, 1.0);
            if i == 1 {
                flow.conf_forward =
                    Raster::from_fn(n, n, Semantic::Confidence1, None, |_, c, px| px[0] = if c < 6 { 1.0 } else { 0.1 }).unwrap();
            }
            src.pairs.push((key, PairData { flow, xyz_ground: ground.clone(), xyz_tile: xyz }));
        }
        // The decoy fits its own pair perfectly but explains fewer pooled matches.
        let res = register_ground_to_air(&src, &GroundToAirConfig::default()).unwrap();
        assert_eq!(res.candidates.len(), 2);
        assert_eq!(res.candidates[0].pooled_inlier_count, n * n);
        assert_eq!(res.candidates[1].pooled_inlier_count, n * 6);
        assert_eq!(res.final_inlier_count, n * n);
        assert_eq!(res.winner, 0);
        let reversed = InMemoryPairs { pairs: src.pairs.iter().rev().cloned().collect() };
        let again = register_ground_to_air(&reversed, &GroundToAirConfig::default()).unwrap();
        assert_eq!(again.transform, res.transform);
        assert_eq!(again.candidates, res.candidates);
        assert!(res.transform.max_param_diff(&truth) < 1e-5);
        let ledger = serde_json::to_value(res.ledger()).unwrap();
        assert_eq!(ledger["winner"], 0);
    }

    proptest! {
        #[test]
        fn tiles_cover_image(h in 1usize..700, w in 1usize..700, tile in 1usize..320, overlap in 0.0f64..0.95) {
            let g = make_tile_grid(h, w, tile, overlap).unwrap();
            let mut covered = vec![false; h * w];
            for t in &g.tiles {
                prop_assert!(t.row_offset + t.height <= h && t.col_offset + t.width <= w);
                for r in t.row_offset..t.row_offset + t.height {
                    for c in t.col_offset..t.col_offset + t.width {
                        covered[r * w + c] = true;
                    }
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
        }
    }
}
