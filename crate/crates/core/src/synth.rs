//! Synthetic scenes with exact ground truth: heightfields with boxes, DSMs,
//! rendered coordinate rasters, dense flows, ground masks and camera sets.
//!
//! All geometry lives in a local east-north-up frame. Ray casts against the
//! heightfield are analytic (plane plus axis-aligned boxes), so every
//! rendered coordinate is exact up to float32 storage.

use crate::geodesy_metrics::{enu_to_geodetic, GeodeticCamera, GeodeticPoint};
use crate::geometry::{umeyama, Sim3Record, Sim3Transform, Vec3};
use crate::gravity::{CameraPose, Observation, ObservedPoint};
use crate::match_filter::FlowPair;
use crate::raster_io::{
    sidecar_path, write_json, xyz_points, write_meta, write_raster, DsmCovariance, GeoTransform, NodataPolicy, Raster, RasterError,
    RasterMeta, Semantic,
};
use crate::registration::{
    oblique_poses, tile_grid_for_render, AirToSatResult, ObliqueViewConfig, PairData, PairFiles, PairKey, PairManifest,
    PairSource, RegistrationError, Tile,
};
use nalgebra::{Matrix3, Rotation3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

// ---------------------------------------------------------------------------
// Heightfield

/// Flat-topped box standing on the base plane; footprint is half-open.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub min_e: f64,
    pub min_n: f64,
    pub max_e: f64,
    pub max_n: f64,
    /// Height above the base plane.
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heightfield {
    pub base: f64,
    pub boxes: Vec<BoxSpec>,
}

impl Heightfield {
    pub fn height(&self, e: f64, n: f64) -> f64 {
        self.boxes
            .iter()
            .filter(|b| e >= b.min_e && e < b.max_e && n >= b.min_n && n < b.max_n)
            .fold(self.base, |h, b| h.max(self.base + b.height))
    }

    /// Distance along the unit direction `d` to the first surface hit.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let mut best = f64::INFINITY;
        if d.z < 0.0 && o.z > self.base {
            best = (self.base - o.z) / d.z;
        }
        for b in &self.boxes {
            let lo = [b.min_e, b.min_n, self.base];
            let hi = [b.max_e, b.max_n, self.base + b.height];
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut miss = false;
            for a in 0..3 {
                if d[a] == 0.0 {
                    if o[a] < lo[a] || o[a] > hi[a] {
                        miss = true;
                        break;
                    }
                } else {
                    let (ta, tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
                    t0 = t0.max(ta.min(tb));
                    t1 = t1.min(ta.max(tb));
                }
            }
            if !miss && t0 <= t1 && t0 > 0.0 && t0 < best {
                best = t0;
            }
        }
        best.is_finite().then_some(best)
    }

    /// Whether `p` is the first surface point seen from `from`.
    pub fn visible_from(&self, from: &Vec3, p: &Vec3) -> bool {
        let d = p - from;
        let dist = d.norm();
        match self.intersect(from, &(d / dist)) {
            Some(t) => (t - dist).abs() <= 1e-7 * dist.max(1.0),
            None => false,
        }
    }
}

fn random_boxes(rng: &mut ChaCha8Rng, count: usize, half_extent: f64, size: (f64, f64), height: (f64, f64), grid: f64) -> Vec<BoxSpec> {
    let snap = |v: f64| (v / grid).round() * grid;
    (0..count)
        .map(|_| {
            let w = snap(rng.random_range(size.0..size.1));
            let d = snap(rng.random_range(size.0..size.1));
            let e = snap(rng.random_range(-half_extent..half_extent - w));
            let n = snap(rng.random_range(-half_extent..half_extent - d));
            let h = (rng.random_range(height.0..height.1) * 4.0).round() / 4.0;
            BoxSpec { min_e: e, min_n: n, max_e: e + w, max_n: n + d, height: h }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Views

/// Pinhole view with square pixels; integer pixel coordinates at centres.
#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveView {
    pub pose: CameraPose,
    pub fov_deg: f64,
    pub height: usize,
    pub width: usize,
}

impl PerspectiveView {
    fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov_deg).to_radians().tan()
    }

    pub fn ray(&self, row: f64, col: f64) -> (Vec3, Vec3) {
        let f = self.focal();
        let d = Vec3::new((col + 0.5 - 0.5 * self.width as f64) / f, (row + 0.5 - 0.5 * self.height as f64) / f, 1.0);
        (self.pose.center, (self.pose.orientation * d).normalize())
    }

    /// Subpixel `(row, col)` of a world point in front of the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        let d = self.pose.orientation.transpose() * (p - self.pose.center);
        if d.z <= 0.0 {
            return None;
        }
        let f = self.focal();
        Some((f * d.y / d.z + 0.5 * self.height as f64 - 0.5, f * d.x / d.z + 0.5 * self.width as f64 - 0.5))
    }
}

/// Orthographic view of a square `2 * half_extent` window.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoView {
    pub pose: CameraPose,
    pub half_extent: f64,
    pub resolution: usize,
    /// Rays start this far behind the image plane.
    pub backoff: f64,
}

impl OrthoView {
    fn pixel(&self) -> f64 {
        2.0 * self.half_extent / self.resolution as f64
    }

    pub fn ray(&self, row: f64, col: f64) -> (Vec3, Vec3) {
        let p = self.pixel();
        let r = &self.pose.orientation;
        let (right, down, fwd) = (r.column(0).into_owned(), r.column(1).into_owned(), r.column(2).into_owned());
        let o = self.pose.center + right * ((col + 0.5) * p - self.half_extent) + down * ((row + 0.5) * p - self.half_extent)
            - fwd * self.backoff;
        (o, fwd)
    }

    pub fn project(&self, q: &Vec3) -> (f64, f64) {
        let p = self.pixel();
        let r = &self.pose.orientation;
        let d = q - self.pose.center;
        let u = r.column(0).dot(&d);
        let v = r.column(1).dot(&d);
        ((v + self.half_extent) / p - 0.5, (u + self.half_extent) / p - 0.5)
    }

    pub fn visible(&self, field: &Heightfield, q: &Vec3) -> bool {
        let fwd = self.pose.orientation.column(2).into_owned();
        let dist = self.backoff + fwd.dot(&(q - self.pose.center));
        let o = q - fwd * dist;
        match field.intersect(&o, &fwd) {
            Some(t) => (t - dist).abs() <= 1e-7 * dist.max(1.0),
            None => false,
        }
    }
}

/// XYZ raster of hit points mapped through `to_frame`; misses are NaN.
fn render_xyz(
    field: &Heightfield,
    height: usize,
    width: usize,
    ray: impl Fn(f64, f64) -> (Vec3, Vec3) + Sync,
    to_frame: &Sim3Transform,
) -> Raster {
    let data: Vec<f32> = (0..height)
        .into_par_iter()
        .flat_map_iter(|r| {
            let ray = &ray;
            (0..width).flat_map(move |c| {
                let (o, d) = ray(r as f64, c as f64);
                match field.intersect(&o, &d) {
                    Some(t) => {
                        let p = to_frame.apply(&(o + d * t));
                        [p.x as f32, p.y as f32, p.z as f32]
                    }
                    None => [f32::NAN; 3],
                }
            })
        })
        .collect();
    Raster::new(height, width, Semantic::Xyz3, data, Some(f32::NAN)).expect("finite render")
}

// ---------------------------------------------------------------------------
// Specs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// Corrupted pixels get low confidence, so the confidence gate catches them.
    Easy,
    /// Corrupted pixels keep their confidence; only cyclic consistency helps.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub flow_jitter_px: f64,
    pub outlier_fraction: f64,
    /// Easy mode sets corrupted confidences to `0.2 * confidence_decay`.
    pub confidence_decay: f64,
    pub mode: CorruptionMode,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { flow_jitter_px: 0.0, outlier_fraction: 0.0, confidence_decay: 0.5, mode: CorruptionMode::Hard }
    }
}

impl NoiseSpec {
    pub fn is_clean(&self) -> bool {
        self.flow_jitter_px == 0.0 && self.outlier_fraction == 0.0
    }
}

/// Window of the DSM grid seen by the synthetic airborne render.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub row_offset: usize,
    pub col_offset: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundSpec {
    /// Ground model frame -> airborne model frame.
    pub ground_to_air: Sim3Record,
    pub images: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub fov_deg: f64,
    pub camera_height_m: f64,
    /// Half-width of the square area covered by the boxes and the render.
    pub scene_radius_m: f64,
    pub boxes: usize,
    pub render_resolution: usize,
    /// Index into the oblique render set; 8 is nadir.
    pub render_id: u32,
    pub tile_size: usize,
    pub overlap_fraction: f64,
    /// Wrong-tile pairs per ground image written by `write_scene`; the
    /// in-memory source always exposes every pair.
    pub written_decoys_per_image: usize,
}

impl Default for GroundSpec {
    fn default() -> Self {
        let rot = Rotation3::from_euler_angles(0.02, -0.03, 1.1);
        let t = Sim3Transform::from_quaternion(0.8, nalgebra::UnitQuaternion::from_rotation_matrix(&rot), Vec3::new(-7.0, 12.5, 1.5))
            .expect("valid transform");
        Self {
            ground_to_air: t.to_record("ground", "air"),
            images: 10,
            image_height: 96,
            image_width: 128,
            fov_deg: 60.0,
            camera_height_m: 1.7,
            scene_radius_m: 256.0,
            boxes: 40,
            render_resolution: 2048,
            render_id: 0,
            tile_size: 300,
            overlap_fraction: 0.25,
            written_decoys_per_image: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Side of the square DSM area (m), centred on the anchor.
    pub extent_m: f64,
    pub dsm_pixel_m: f64,
    pub base_height_m: f64,
    /// Explicit boxes; when empty, `random_boxes` are generated.
    pub boxes: Vec<BoxSpec>,
    pub random_boxes: usize,
    pub anchor: GeodeticPoint,
    /// Airborne model frame -> local geodetic (ENU) frame.
    pub air_to_geo: Sim3Record,
    /// `None`: the DSM minus a 16-pixel border.
    pub air_window: Option<WindowSpec>,
    pub air_cameras: usize,
    pub dsm_sigma_m: [f64; 3],
    pub noise: NoiseSpec,
    pub ground: Option<GroundSpec>,
    pub gravity: Option<GravitySpec>,
    pub seed: u64,
}

pub fn default_air_to_geo() -> Sim3Transform {
    let rot = *Rotation3::from_axis_angle(&Vec3::z_axis(), 17f64.to_radians()).matrix();
    Sim3Transform::new(1.0, rot, Vec3::new(31.0, -12.0, 4.0)).expect("valid transform")
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            extent_m: 128.0,
            dsm_pixel_m: 0.5,
            base_height_m: 0.0,
            boxes: Vec::new(),
            random_boxes: 12,
            anchor: GeodeticPoint { lat_deg: 38.8895, lon_deg: -77.0353, alt_m: 20.0 },
            air_to_geo: default_air_to_geo().to_record("air", "geo"),
            air_window: None,
            air_cameras: 12,
            dsm_sigma_m: [1.0, 1.0, 1.5],
            noise: NoiseSpec::default(),
            ground: None,
            gravity: None,
            seed: 7,
        }
    }
}

// ---------------------------------------------------------------------------
// Corruption

/// Which pixels `corrupt_flows` replaced with random targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorruptionMask {
    /// Row-major over image A.
    pub forward: Vec<bool>,
    /// Row-major over image B.
    pub backward: Vec<bool>,
}

impl CorruptionMask {
    pub fn forward_count(&self) -> usize {
        self.forward.iter().filter(|&&c| c).count()
    }
}

fn corrupt_one(
    flow: &Raster,
    conf: &Raster,
    target_dims: (usize, usize),
    noise: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> (Raster, Raster, Vec<bool>) {
    let (h, w) = flow.dims();
    let mut data = flow.data().to_vec();
    let mut cdata = conf.data().to_vec();
    let mut mask = vec![false; h * w];
    let jitter = (noise.flow_jitter_px > 0.0).then(|| Normal::new(0.0, noise.flow_jitter_px).expect("finite sigma"));
    for i in 0..h * w {
        if flow.pixel_is_nodata(i / w, i % w) {
            continue;
        }
        if rng.random::<f64>() < noise.outlier_fraction {
            mask[i] = true;
            data[2 * i] = rng.random_range(-0.5..target_dims.1 as f64 - 0.5) as f32;
            data[2 * i + 1] = rng.random_range(-0.5..target_dims.0 as f64 - 0.5) as f32;
            if noise.mode == CorruptionMode::Easy {
                cdata[i] = (0.2 * noise.confidence_decay) as f32;
            }
        } else if let Some(j) = &jitter {
            data[2 * i] += j.sample(rng) as f32;
            data[2 * i + 1] += j.sample(rng) as f32;
        }
    }
    (
        Raster::new(h, w, Semantic::Flow2, data, flow.nodata()).expect("finite flow"),
        Raster::new(h, w, Semantic::Confidence1, cdata, conf.nodata()).expect("finite confidence"),
        mask,
    )
}

/// Gaussian jitter plus independent uniform outliers on both flows.
pub fn corrupt_flows(fp: &FlowPair, noise: &NoiseSpec, seed: u64) -> (FlowPair, CorruptionMask) {
    let mut rng_f = ChaCha8Rng::seed_from_u64(seed);
    let mut rng_b = ChaCha8Rng::seed_from_u64(seed);
    rng_b.set_stream(1);
    let (fwd, cf, mf) = corrupt_one(&fp.forward, &fp.conf_forward, fp.dims_b(), noise, &mut rng_f);
    let (bwd, cb, mb) = corrupt_one(&fp.backward, &fp.conf_backward, fp.dims_a(), noise, &mut rng_b);
    let out = FlowPair { forward: fwd, backward: bwd, conf_forward: cf, conf_backward: cb, model_confidence: fp.model_confidence.clone() };
    (out, CorruptionMask { forward: mf, backward: mb })
}

// ---------------------------------------------------------------------------
// Air-to-satellite scene

#[derive(Debug, Clone)]
pub struct AirSatScene {
    pub flow: FlowPair,
    pub clean_flow: FlowPair,
    pub corruption: CorruptionMask,
    pub xyz_air: Raster,
    pub dsm: Raster,
    pub geo: GeoTransform,
    pub covariance: DsmCovariance,
    pub heightfield: Heightfield,
    pub window: WindowSpec,
    /// Airborne model frame -> ENU.
    pub truth: Sim3Transform,
    pub cameras_model: Vec<CameraPose>,
    pub cameras_truth_enu: Vec<Vec3>,
    pub anchor: GeodeticPoint,
}

impl AirSatScene {
    pub fn cameras_truth_geodetic(&self) -> Vec<GeodeticCamera> {
        self.cameras_model
            .iter()
            .zip(&self.cameras_truth_enu)
            .map(|(c, p)| {
                let g = enu_to_geodetic(p, &self.anchor);
                GeodeticCamera { id: c.id.clone(), lat: g.lat_deg, lon: g.lon_deg, alt: g.alt_m }
            })
            .collect()
    }

    pub fn mean_standoff(&self) -> f64 {
        let c = Vec3::new(0.0, 0.0, self.heightfield.base);
        crate::geodesy_metrics::mean_standoff(&self.cameras_truth_enu, &c)
    }
}

pub fn generate_air_sat(spec: &SceneSpec) -> AirSatScene {
    let truth = Sim3Transform::try_from(&spec.air_to_geo).expect("valid air_to_geo");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = (spec.extent_m / spec.dsm_pixel_m).round() as usize;
    let half = 0.5 * n as f64 * spec.dsm_pixel_m;
    let boxes = if spec.boxes.is_empty() {
        random_boxes(&mut rng, spec.random_boxes, 0.85 * half, (0.05 * spec.extent_m, 0.16 * spec.extent_m), (2.0, 15.0), spec.dsm_pixel_m)
    } else {
        spec.boxes.clone()
    };
    let field = Heightfield { base: spec.base_height_m, boxes };
    let geo = GeoTransform {
        origin_easting: -half,
        origin_northing: half,
        pixel_size_x: spec.dsm_pixel_m,
        pixel_size_y: -spec.dsm_pixel_m,
        crs_label: "local-enu".into(),
        geodetic_anchor: spec.anchor,
    };
    let dsm = Raster::from_fn(n, n, Semantic::Dsm1, None, |r, c, px| {
        let (e, nn) = geo.pixel_to_world(r as f64, c as f64);
        px[0] = field.height(e, nn) as f32;
    })
    .expect("finite DSM");
    let window = spec.air_window.unwrap_or(WindowSpec { row_offset: 16, col_offset: 16, height: n - 32, width: n - 32 });
    let inv = truth.inverse();
    let xyz_air = Raster::from_fn(window.height, window.width, Semantic::Xyz3, Some(f32::NAN), |r, c, px| {
        let (br, bc) = ((r + window.row_offset) as f64, (c + window.col_offset) as f64);
        let (e, nn) = geo.pixel_to_world(br, bc);
        let h = dsm.get(br as usize, bc as usize, 0) as f64;
        let p = inv.apply(&Vec3::new(e, nn, h));
        px.copy_from_slice(&[p.x as f32, p.y as f32, p.z as f32]);
    })
    .expect("finite xyz");
    let (r0, c0) = (window.row_offset as f32, window.col_offset as f32);
    let forward = Raster::from_fn(window.height, window.width, Semantic::Flow2, None, |r, c, px| {
        px[0] = c as f32 + c0;
        px[1] = r as f32 + r0;
    })
    .expect("finite flow");
    let backward = Raster::from_fn(n, n, Semantic::Flow2, None, |r, c, px| {
        px[0] = c as f32 - c0;
        px[1] = r as f32 - r0;
    })
    .expect("finite flow");
    let clean_flow = FlowPair {
        forward,
        backward,
        conf_forward: Raster::filled(window.height, window.width, Semantic::Confidence1, 0.9),
        conf_backward: Raster::filled(n, n, Semantic::Confidence1, 0.9),
        model_confidence: Some(Raster::filled(window.height, window.width, Semantic::Confidence1, 0.95)),
    };
    let (flow, corruption) = corrupt_flows(&clean_flow, &spec.noise, spec.seed.wrapping_add(1));

    let ring = 0.45 * spec.extent_m;
    let mut cameras_model = Vec::new();
    let mut cameras_truth_enu = Vec::new();
    for k in 0..spec.air_cameras {
        let az = (360.0 * k as f64 / spec.air_cameras as f64 + rng.random_range(-5.0..5.0)).to_radians();
        let pos = Vec3::new(ring * az.sin(), ring * az.cos(), spec.base_height_m + rng.random_range(0.25..0.4) * spec.extent_m);
        let target = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), spec.base_height_m);
        let cam = CameraPose::look_at(format!("air_{k:03}"), pos, target);
        cameras_model.push(cam.transformed(&inv));
        cameras_truth_enu.push(pos);
    }
    let sigma = Matrix3::from_diagonal(&Vec3::from(spec.dsm_sigma_m.map(|s| s * s)));
    AirSatScene {
        flow,
        clean_flow,
        corruption,
        xyz_air,
        dsm,
        geo,
        covariance: DsmCovariance::new(sigma).expect("positive sigmas"),
        heightfield: field,
        window,
        truth,
        cameras_model,
        cameras_truth_enu,
        anchor: spec.anchor,
    }
}

/// Least-squares fit on the pipeline's own correspondences restricted to
/// pairs untouched by outlier corruption. Used as the reference accuracy
/// for noisy end-to-end runs.
pub fn clean_pair_fit(scene: &AirSatScene, result: &AirToSatResult) -> Option<Sim3Transform> {
    let (_, wa) = scene.flow.dims_a();
    let (_, wb) = scene.flow.dims_b();
    let (hb, _) = scene.flow.dims_b();
    let bad_b = |row: f64, col: f64| {
        let (r0, c0) = (row.floor().max(0.0) as usize, col.floor().max(0.0) as usize);
        (r0..=(r0 + 1).min(hb - 1)).any(|r| (c0..=(c0 + 1).min(wb - 1)).any(|c| scene.corruption.backward[r * wb + c]))
    };
    let keep: Vec<usize> = result
        .provenance
        .iter()
        .enumerate()
        .filter(|(_, ((ra, ca), (rb, cb)))| !scene.corruption.forward[*ra as usize * wa + *ca as usize] && !bad_b(*rb, *cb))
        .map(|(i, _)| i)
        .collect();
    umeyama(&result.correspondences.select(&keep)).ok()
}

// ---------------------------------------------------------------------------
// Ground-to-air scene

#[derive(Debug, Clone)]
pub struct GroundImage {
    pub id: String,
    /// Camera in the ENU frame.
    pub view: PerspectiveView,
    /// Ground-model-frame coordinates per pixel.
    pub xyz: Arc<Raster>,
    /// ENU hit point per pixel.
    hits: Vec<Option<Vec3>>,
}

/// Ground images against the tiles of one oblique render. Exactly one tile
/// per ground image gets geometrically exact flows; every other pair gets
/// uniformly random flows and confidences. Pairs are generated on demand.
pub struct GroundScene {
    pub spec: GroundSpec,
    pub heightfield: Heightfield,
    /// Ground model frame -> airborne model frame.
    pub truth: Sim3Transform,
    /// Airborne model frame -> ENU.
    pub air_to_geo: Sim3Transform,
    pub render: OrthoView,
    pub render_xyz: Arc<Raster>,
    pub tiles: Vec<Tile>,
    pub images: Vec<GroundImage>,
    pub correct_tile: Vec<usize>,
    seed: u64,
}

impl std::fmt::Debug for GroundScene {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GroundScene").field("images", &self.images.len()).field("tiles", &self.tiles.len()).finish()
    }
}

/// Matches whose tile-side bilinear coordinate differs from the true point by
/// more than this (m) are left out of the exact flows.
const TILE_LOOKUP_TOL: f64 = 1e-3;

pub fn generate_ground(spec: &GroundSpec, air_to_geo: &Sim3Transform, seed: u64) -> GroundScene {
    let truth = Sim3Transform::try_from(&spec.ground_to_air).expect("valid ground_to_air");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let radius = spec.scene_radius_m;
    let field = Heightfield {
        base: 0.0,
        boxes: random_boxes(&mut rng, spec.boxes, 0.9 * radius, (0.04 * radius, 0.15 * radius), (3.0, 20.0), 0.25),
    };
    let cfg = ObliqueViewConfig { resolution_px: spec.render_resolution, ..Default::default() };
    let poses = oblique_poses(&Vec3::zeros(), radius, &cfg).expect("positive radius");
    let pose = poses.poses.iter().find(|p| p.render_id == spec.render_id).expect("render id in oblique set").pose.clone();
    let render = OrthoView { pose, half_extent: radius, resolution: spec.render_resolution, backoff: 2.0 * radius };
    let geo_to_air = air_to_geo.inverse();
    let render_xyz = Arc::new(render_xyz(&field, render.resolution, render.resolution, |r, c| render.ray(r, c), &geo_to_air));
    let tiles = tile_grid_for_render(spec.render_id, render.resolution, render.resolution, spec.tile_size, spec.overlap_fraction)
        .expect("valid tiling")
        .tiles;
    let geo_to_ground = truth.inverse().compose(&geo_to_air);

    let mut images = Vec::new();
    let mut correct_tile = Vec::new();
    let mut attempts = 0;
    while images.len() < spec.images {
        attempts += 1;
        assert!(attempts < 100 * spec.images.max(1), "could not place ground cameras");
        let e = rng.random_range(-0.6 * radius..0.6 * radius);
        let n = rng.random_range(-0.6 * radius..0.6 * radius);
        if field.height(e, n) != field.base || field.boxes.iter().any(|b| e > b.min_e - 2.0 && e < b.max_e + 2.0 && n > b.min_n - 2.0 && n < b.max_n + 2.0) {
            continue;
        }
        let center = Vec3::new(e, n, field.base + spec.camera_height_m);
        // Roughly facing the same way as the render, tilted down.
        let fwd = render.pose.forward();
        let heading = fwd.y.atan2(fwd.x) + rng.random_range(-0.5..0.5);
        let tilt = rng.random_range(15f64..25.0).to_radians();
        let dir = Vec3::new(heading.cos() * tilt.cos(), heading.sin() * tilt.cos(), -tilt.sin());
        let id = format!("ground_{:03}", images.len());
        let view = PerspectiveView {
            pose: CameraPose::look_at(id.clone(), center, center + dir),
            fov_deg: spec.fov_deg,
            height: spec.image_height,
            width: spec.image_width,
        };
        let hits: Vec<Option<Vec3>> = (0..spec.image_height * spec.image_width)
            .into_par_iter()
            .map(|i| {
                let (o, d) = view.ray((i / spec.image_width) as f64, (i % spec.image_width) as f64);
                field.intersect(&o, &d).map(|t| o + d * t)
            })
            .collect();
        let mut counts = vec![0usize; tiles.len()];
        for p in hits.iter().flatten() {
            if !render.visible(&field, p) {
                continue;
            }
            let (r, c) = render.project(p);
            for (k, t) in tiles.iter().enumerate() {
                if r >= t.row_offset as f64 && c >= t.col_offset as f64 && r <= (t.row_offset + t.height - 1) as f64 && c <= (t.col_offset + t.width - 1) as f64 {
                    counts[k] += 1;
                }
            }
        }
        let best = (0..tiles.len()).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).expect("tiles");
        if counts[best] < spec.image_height * spec.image_width / 4 {
            continue;
        }
        let data: Vec<f32> = hits
            .iter()
            .flat_map(|h| match h {
                Some(p) => {
                    let q = geo_to_ground.apply(p);
                    [q.x as f32, q.y as f32, q.z as f32]
                }
                None => [f32::NAN; 3],
            })
            .collect();
        let xyz = Raster::new(spec.image_height, spec.image_width, Semantic::Xyz3, data, Some(f32::NAN)).expect("finite xyz");
        images.push(GroundImage { id, view, xyz: Arc::new(xyz), hits });
        correct_tile.push(best);
    }
    GroundScene {
        spec: spec.clone(),
        heightfield: field,
        truth,
        air_to_geo: *air_to_geo,
        render,
        render_xyz,
        tiles,
        images,
        correct_tile,
        seed,
    }
}

fn crop(r: &Raster, t: &Tile) -> Raster {
    Raster::from_fn(t.height, t.width, r.semantic(), r.nodata(), |row, col, px| {
        px.copy_from_slice(r.pixel(row + t.row_offset, col + t.col_offset))
    })
    .expect("crop of valid raster")
}

impl GroundScene {
    pub fn key(&self, image: usize, tile: usize) -> PairKey {
        PairKey { ground_image: self.images[image].id.clone(), tile: self.tiles[tile] }
    }

    fn index_of(&self, key: &PairKey) -> Option<(usize, usize)> {
        let i = self.images.iter().position(|g| g.id == key.ground_image)?;
        let t = self.tiles.iter().position(|t| *t == key.tile)?;
        Some((i, t))
    }

    pub fn is_correct(&self, key: &PairKey) -> bool {
        self.index_of(key).is_some_and(|(i, t)| self.correct_tile[i] == t)
    }

    fn exact_pair(&self, image: usize, tile: &Tile) -> FlowPair {
        let g = &self.images[image];
        let (h, w) = (g.view.height, g.view.width);
        let tile_xyz = crop(&self.render_xyz, tile);
        let geo_to_air = self.air_to_geo.inverse();
        let mut fwd = vec![f32::NAN; h * w * 2];
        let mut conf_f = vec![0.0f32; h * w];
        for (i, hit) in g.hits.iter().enumerate() {
            let Some(p) = hit else { continue };
            if !self.render.visible(&self.heightfield, p) {
                continue;
            }
            let (r, c) = self.render.project(p);
            let (tr, tc) = ((r - tile.row_offset as f64) as f32, (c - tile.col_offset as f64) as f32);
            let Ok(v) = tile_xyz.sample_bilinear(tr as f64, tc as f64, NodataPolicy::Strict) else { continue };
            let truth_air = geo_to_air.apply(p);
            if (Vec3::new(v[0], v[1], v[2]) - truth_air).norm() > TILE_LOOKUP_TOL {
                continue;
            }
            fwd[2 * i] = tc;
            fwd[2 * i + 1] = tr;
            conf_f[i] = 1.0;
        }
        let (th, tw) = (tile.height, tile.width);
        let bwd: Vec<f32> = (0..th * tw)
            .into_par_iter()
            .flat_map_iter(|i| {
                let (r, c) = ((tile.row_offset + i / tw) as f64, (tile.col_offset + i % tw) as f64);
                let (o, d) = self.render.ray(r, c);
                let target = self
                    .heightfield
                    .intersect(&o, &d)
                    .map(|t| o + d * t)
                    .filter(|q| self.heightfield.visible_from(&g.view.pose.center, q))
                    .and_then(|q| g.view.project(&q))
                    .filter(|&(gr, gc)| gr >= -0.5 && gc >= -0.5 && gr <= h as f64 - 0.5 && gc <= w as f64 - 0.5);
                match target {
                    Some((gr, gc)) => [gc as f32, gr as f32],
                    None => [f32::NAN; 2],
                }
            })
            .collect();
        let conf_b: Vec<f32> = bwd.chunks_exact(2).map(|v| if v[0].is_nan() { 0.0 } else { 1.0 }).collect();
        FlowPair {
            forward: Raster::new(h, w, Semantic::Flow2, fwd, Some(f32::NAN)).expect("flow"),
            backward: Raster::new(th, tw, Semantic::Flow2, bwd, Some(f32::NAN)).expect("flow"),
            conf_forward: Raster::new(h, w, Semantic::Confidence1, conf_f, None).expect("confidence"),
            conf_backward: Raster::new(th, tw, Semantic::Confidence1, conf_b, None).expect("confidence"),
            model_confidence: None,
        }
    }

    fn random_pair(&self, image: usize, tile_index: usize) -> FlowPair {
        let g = &self.images[image];
        let tile = &self.tiles[tile_index];
        let (h, w) = (g.view.height, g.view.width);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        rng.set_stream((image * self.tiles.len() + tile_index) as u64);
        let mut flow = |rows: usize, cols: usize, th: usize, tw: usize| {
            let f = Raster::from_fn(rows, cols, Semantic::Flow2, None, |_, _, px| {
                px[0] = rng.random_range(-0.5..tw as f64 - 0.5) as f32;
                px[1] = rng.random_range(-0.5..th as f64 - 0.5) as f32;
            })
            .expect("flow");
            let c = Raster::from_fn(rows, cols, Semantic::Confidence1, None, |_, _, px| px[0] = rng.random::<f32>()).expect("conf");
            (f, c)
        };
        let (forward, conf_forward) = flow(h, w, tile.height, tile.width);
        let (backward, conf_backward) = flow(tile.height, tile.width, h, w);
        FlowPair { forward, backward, conf_forward, conf_backward, model_confidence: None }
    }

    pub fn pair(&self, image: usize, tile_index: usize) -> PairData {
        let tile = self.tiles[tile_index];
        let flow = if self.correct_tile[image] == tile_index { self.exact_pair(image, &tile) } else { self.random_pair(image, tile_index) };
        PairData { flow, xyz_ground: self.images[image].xyz.clone(), xyz_tile: Arc::new(crop(&self.render_xyz, &tile)) }
    }

    /// Camera centres of the ground images in the ground model frame.
    pub fn ground_cameras(&self) -> Vec<CameraPose> {
        let geo_to_ground = self.truth.inverse().compose(&self.air_to_geo.inverse());
        self.images.iter().map(|g| g.view.pose.transformed(&geo_to_ground)).collect()
    }
}

impl PairSource for GroundScene {
    fn keys(&self) -> Vec<PairKey> {
        (0..self.images.len()).flat_map(|i| (0..self.tiles.len()).map(move |t| (i, t))).map(|(i, t)| self.key(i, t)).collect()
    }

    fn load(&self, key: &PairKey) -> Result<PairData, RegistrationError> {
        let (i, t) = self.index_of(key).ok_or_else(|| RegistrationError::InvalidConfig(format!("unknown pair {key}")))?;
        Ok(self.pair(i, t))
    }
}

// ---------------------------------------------------------------------------
// Gravity scene

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GravitySpec {
    pub up: [f64; 3],
    pub extent_m: f64,
    pub ground_points: usize,
    pub clutter_points: usize,
    /// Bound on the ground-point noise magnitude as a fraction of the extent;
    /// offsets are uniform in the ball of that radius.
    pub noise_fraction: f64,
    pub cameras: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for GravitySpec {
    fn default() -> Self {
        Self {
            up: [0.1, -0.2, 1.0],
            extent_m: 100.0,
            ground_points: 5000,
            clutter_points: 500,
            noise_fraction: 0.01,
            cameras: 12,
            image_size: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GravityScene {
    pub up: Vec3,
    pub points: Vec<ObservedPoint>,
    pub masks: BTreeMap<String, Raster>,
    pub cameras: Vec<CameraPose>,
}

pub fn generate_gravity(spec: &GravitySpec) -> GravityScene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let up = Vec3::from(spec.up).normalize();
    let helper = if up.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u1 = up.cross(&helper).normalize();
    let u2 = up.cross(&u1);
    let half = 0.5 * spec.extent_m;
    let origin = Vec3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
    let radius = spec.noise_fraction * spec.extent_m;
    let noise = |rng: &mut ChaCha8Rng| -> Vec3 {
        let d: [f64; 3] = UnitSphere.sample(rng);
        Vec3::from(d) * radius * rng.random::<f64>().cbrt()
    };
    let mut xyz = Vec::new();
    for _ in 0..spec.ground_points {
        let p = origin + u1 * rng.random_range(-half..half) + u2 * rng.random_range(-half..half);
        xyz.push((p + noise(&mut rng), true));
    }
    for _ in 0..spec.clutter_points {
        let p = origin + u1 * rng.random_range(-half..half) + u2 * rng.random_range(-half..half) + up * rng.random_range(0.08..0.3) * spec.extent_m;
        xyz.push((p, false));
    }
    let view = |k: usize, rng: &mut ChaCha8Rng| {
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let rad = rng.random_range(0.1..0.4) * spec.extent_m;
        let pos = origin + (u1 * a.cos() + u2 * a.sin()) * rad + up * rng.random_range(0.15..0.4) * spec.extent_m;
        let target = origin + u1 * rng.random_range(-0.2..0.2) * spec.extent_m + u2 * rng.random_range(-0.2..0.2) * spec.extent_m;
        PerspectiveView {
            pose: CameraPose::look_at(format!("cam_{k:02}"), pos, target),
            fov_deg: 60.0,
            height: spec.image_size,
            width: spec.image_size,
        }
    };
    let views: Vec<PerspectiveView> = (0..spec.cameras).map(|k| view(k, &mut rng)).collect();
    let mut masks = BTreeMap::new();
    let mut observations: Vec<Vec<Observation>> = vec![Vec::new(); xyz.len()];
    for v in &views {
        let mut mask = Raster::filled(v.height, v.width, Semantic::Mask1, 0.0);
        let mut projected = Vec::new();
        for (i, (p, _)) in xyz.iter().enumerate() {
            if let Some((r, c)) = v.project(p) {
                if r >= -0.5 && c >= -0.5 && r < v.height as f64 - 0.5 && c < v.width as f64 - 0.5 {
                    projected.push((i, r, c));
                }
            }
        }
        // Ground labels first, clutter overrides them.
        for pass in [true, false] {
            for &(i, r, c) in &projected {
                if xyz[i].1 == pass {
                    mask.pixel_mut(r.round() as usize, c.round() as usize)[0] = if pass { 1.0 } else { 0.0 };
                }
            }
        }
        for &(i, r, c) in &projected {
            observations[i].push(Observation { image: v.pose.id.clone(), row: r, col: c });
        }
        masks.insert(v.pose.id.clone(), mask);
    }
    let points = xyz.into_iter().zip(observations).map(|((p, _), observations)| ObservedPoint { xyz: p, observations }).collect();
    GravityScene { up, points, masks, cameras: views.into_iter().map(|v| v.pose).collect() }
}

// ---------------------------------------------------------------------------

/// Everything `synth` produces for one spec.
pub struct SceneBundle {
    pub spec: SceneSpec,
    pub air: AirSatScene,
    pub ground: Option<GroundScene>,
    pub gravity: Option<GravityScene>,
}

pub fn generate_scene(spec: &SceneSpec) -> SceneBundle {
    let air = generate_air_sat(spec);
    let ground = spec.ground.as_ref().map(|g| generate_ground(g, &air.truth, spec.seed));
    let gravity = spec.gravity.as_ref().map(generate_gravity);
    SceneBundle { spec: spec.clone(), air, ground, gravity }
}

/// Ground-truth file written next to a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub anchor: GeodeticPoint,
    pub air_to_geo: Sim3Record,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_to_air: Option<Sim3Record>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gravity_up: Option<[f64; 3]>,
    pub corrupted_forward_pixels: usize,
}

/// Relative paths of everything `write_scene` produces.
pub mod layout {
    pub const SPEC: &str = "scene.json";
    pub const TRUTH: &str = "truth.json";
    pub const FLOW_FWD: &str = "air/flow_fwd.grr";
    pub const FLOW_BWD: &str = "air/flow_bwd.grr";
    pub const CONF_FWD: &str = "air/conf_fwd.grr";
    pub const CONF_BWD: &str = "air/conf_bwd.grr";
    pub const MODEL_CONF: &str = "air/model_conf.grr";
    pub const XYZ_AIR: &str = "air/xyz.grr";
    pub const CAMERAS_AIR: &str = "air/cameras.json";
    pub const DSM: &str = "sat/dsm.grr";
    pub const COVARIANCE: &str = "sat/cov.json";
    pub const CAMERAS_TRUTH: &str = "cams_truth.json";
    pub const GROUND_PAIRS: &str = "ground/pairs.json";
    pub const GROUND_CLOUD: &str = "ground/cloud.csv";
    /// Airborne render coordinates; also the ICP target cloud.
    pub const RENDER_XYZ: &str = "ground/render_xyz.grr";
    pub const GROUND_CAMERAS: &str = "ground/cameras.json";
    pub const GRAVITY_POINTS: &str = "gravity/points.json";
    pub const GRAVITY_CAMERAS: &str = "gravity/cameras.json";
    pub const GRAVITY_MASKS: &str = "gravity/masks";
}

fn ensure_parent(path: &Path) -> Result<(), RasterError> {
    match path.parent() {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| RasterError::io(dir, e)),
        None => Ok(()),
    }
}

fn put_raster(dir: &Path, rel: &str, r: &Raster) -> Result<(), RasterError> {
    let path = dir.join(rel);
    ensure_parent(&path)?;
    write_raster(r, &path)
}

fn put_json<T: Serialize + ?Sized>(dir: &Path, rel: &str, v: &T) -> Result<(), RasterError> {
    let path = dir.join(rel);
    ensure_parent(&path)?;
    write_json(v, &path)
}

fn put_cloud(dir: &Path, rel: &str, points: &[Vec3]) -> Result<(), RasterError> {
    let path = dir.join(rel);
    ensure_parent(&path)?;
    let mut text = String::from("x,y,z\n");
    for p in points {
        text.push_str(&format!("{},{},{}\n", p.x, p.y, p.z));
    }
    std::fs::write(&path, text).map_err(|e| RasterError::io(&path, e))
}

/// Writes a scene as GRR1 rasters and JSON files under `dir` (see [`layout`]).
pub fn write_scene(bundle: &SceneBundle, dir: &Path) -> Result<(), RasterError> {
    let air = &bundle.air;
    put_json(dir, layout::SPEC, &bundle.spec)?;
    put_raster(dir, layout::FLOW_FWD, &air.flow.forward)?;
    put_raster(dir, layout::FLOW_BWD, &air.flow.backward)?;
    put_raster(dir, layout::CONF_FWD, &air.flow.conf_forward)?;
    put_raster(dir, layout::CONF_BWD, &air.flow.conf_backward)?;
    if let Some(m) = &air.flow.model_confidence {
        put_raster(dir, layout::MODEL_CONF, m)?;
    }
    put_raster(dir, layout::XYZ_AIR, &air.xyz_air)?;
    put_raster(dir, layout::DSM, &air.dsm)?;
    let meta = RasterMeta { geotransform: Some(air.geo.clone()), covariance: Some(air.covariance), provenance: BTreeMap::new() };
    write_meta(&meta, &sidecar_path(&dir.join(layout::DSM)))?;
    put_json(dir, layout::COVARIANCE, &air.covariance)?;
    put_json(dir, layout::CAMERAS_AIR, &air.cameras_model.iter().map(CameraPose::to_record).collect::<Vec<_>>())?;
    put_json(dir, layout::CAMERAS_TRUTH, &air.cameras_truth_geodetic())?;

    if let Some(g) = &bundle.ground {
        let mut rng = ChaCha8Rng::seed_from_u64(g.seed ^ 0xdec0);
        let mut manifest = PairManifest::default();
        put_raster(dir, layout::RENDER_XYZ, &g.render_xyz)?;
        for (i, img) in g.images.iter().enumerate() {
            let xyz_rel = format!("ground/{}/xyz.grr", img.id);
            put_raster(dir, &xyz_rel, &img.xyz)?;
            let decoys = g.spec.written_decoys_per_image.min(g.tiles.len() - 1);
            let mut tiles: Vec<usize> = rand::seq::index::sample(&mut rng, g.tiles.len() - 1, decoys)
                .into_iter()
                .map(|t| if t >= g.correct_tile[i] { t + 1 } else { t })
                .collect();
            tiles.push(g.correct_tile[i]);
            tiles.sort_unstable();
            for t in tiles {
                let tile = g.tiles[t];
                let pair = g.pair(i, t);
                let base = format!("ground/{}/tile_r{}_{}_{}", img.id, tile.render_id, tile.row_offset, tile.col_offset);
                let rel = |name: &str| format!("{base}/{name}");
                put_raster(dir, &rel("flow_fwd.grr"), &pair.flow.forward)?;
                put_raster(dir, &rel("flow_bwd.grr"), &pair.flow.backward)?;
                put_raster(dir, &rel("conf_fwd.grr"), &pair.flow.conf_forward)?;
                put_raster(dir, &rel("conf_bwd.grr"), &pair.flow.conf_backward)?;
                put_raster(dir, &rel("xyz_tile.grr"), &pair.xyz_tile)?;
                // Paths in the manifest are relative to ground/.
                let strip = |p: String| PathBuf::from(p.trim_start_matches("ground/"));
                manifest.pairs.push(PairFiles {
                    ground_image: img.id.clone(),
                    tile,
                    flow_fwd: strip(rel("flow_fwd.grr")),
                    flow_bwd: strip(rel("flow_bwd.grr")),
                    conf_fwd: strip(rel("conf_fwd.grr")),
                    conf_bwd: strip(rel("conf_bwd.grr")),
                    model_conf: None,
                    xyz_ground: strip(xyz_rel.clone()),
                    xyz_tile: strip(rel("xyz_tile.grr")),
                });
            }
        }
        put_json(dir, layout::GROUND_PAIRS, &manifest)?;
        let ground_cloud: Vec<Vec3> = g.images.iter().flat_map(|img| xyz_points(&img.xyz)).collect();
        put_cloud(dir, layout::GROUND_CLOUD, &ground_cloud)?;
        put_json(dir, layout::GROUND_CAMERAS, &g.ground_cameras().iter().map(CameraPose::to_record).collect::<Vec<_>>())?;
    }

    if let Some(gs) = &bundle.gravity {
        put_json(dir, layout::GRAVITY_POINTS, &gs.points)?;
        put_json(dir, layout::GRAVITY_CAMERAS, &gs.cameras.iter().map(CameraPose::to_record).collect::<Vec<_>>())?;
        for (id, mask) in &gs.masks {
            put_raster(dir, &format!("{}/{id}.grr", layout::GRAVITY_MASKS), mask)?;
        }
    }

    let truth = SceneTruth {
        anchor: air.anchor,
        air_to_geo: air.truth.to_record("air", "geo"),
        ground_to_air: bundle.ground.as_ref().map(|g| g.truth.to_record("ground", "air")),
        gravity_up: bundle.gravity.as_ref().map(|g| [g.up.x, g.up.y, g.up.z]),
        corrupted_forward_pixels: air.corruption.forward_count(),
    };
    put_json(dir, layout::TRUTH, &truth)
}
