//! Subcommand implementations. Each one reads its inputs, calls the library
//! operation of the same name and writes JSON/CSV/GRR1 outputs plus a run
//! manifest.

use crate::error::CliError;
use crate::manifest::Recorder;
use crate::{Command, GlobalArgs};
use clap::Args;
use georeg::geodesy_metrics::{
    enu_to_geodetic, evaluate, geodetic_to_enu, mean_standoff, GeodeticCamera, GeodeticPoint, RegistrationReport,
};
use georeg::geometry::{RansacConfig, Sim3Record, Sim3Transform, Vec3};
use georeg::gravity::{
    estimate_gravity, select_ground_points, CameraPose, CameraRecord, ObservedPoint, PlaneModel, PlaneRansacConfig,
    RayConfig,
};
use georeg::icp::{icp_refine, read_point_cloud, IcpConfig, IcpIterate};
use georeg::match_filter::{filter_matches, write_matches_csv, FilterConfig, FlowPair};
use georeg::raster_io::{read_json, read_meta, read_raster, sidecar_path, write_json, DsmCovariance, Raster};
use georeg::registration::{
    gate_subgraph, AIR_SAT_THRESHOLD_PX, oblique_poses, plan_tiles, register_air_to_sat, register_ground_to_air, FilePairs, GateDecision,
    GroundToAirConfig, ObliqueViewConfig, RenderPoseRecord, SubgraphGateConfig, Tile,
};
use georeg::synth::{generate_scene, write_scene, GravitySpec, GroundSpec, SceneSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub fn run(global: &GlobalArgs, command: Command) -> Result<(), CliError> {
    match command {
        Command::FilterMatches(a) => filter(global, a),
        Command::EstimateGravity(a) => gravity(global, a),
        Command::RegisterAir2Sat(a) => air2sat(global, a),
        Command::RegisterGround2Air(a) => ground2air(global, a),
        Command::IcpRefine(a) => icp(global, a),
        Command::Evaluate(a) => eval(global, a),
        Command::Synth(a) => synth(global, a),
        Command::TilePlan(a) => tile_plan(global, a),
        Command::ObliquePoses(a) => oblique(global, a),
    }
}

// ---------------------------------------------------------------------------
// Shared helpers

fn load_config<T: DeserializeOwned + Default>(global: &GlobalArgs, rec: &mut Recorder) -> Result<T, CliError> {
    match &global.config {
        None => Ok(T::default()),
        Some(path) => {
            rec.input(path);
            read_json(path).map_err(|e| match e {
                georeg::raster_io::RasterError::Json { .. } => CliError::usage(format!("config: {e}")),
                other => other.into(),
            })
        }
    }
}

fn read_input(rec: &mut Recorder, path: &Path) -> Result<Raster, CliError> {
    rec.input(path);
    Ok(read_raster(path)?)
}

fn read_json_input<T: DeserializeOwned>(rec: &mut Recorder, path: &Path) -> Result<T, CliError> {
    rec.input(path);
    Ok(read_json(path)?)
}

fn write_output<T: Serialize + ?Sized>(rec: &mut Recorder, value: &T, path: &Path) -> Result<(), CliError> {
    write_json(value, path)?;
    rec.output(path);
    Ok(())
}

/// `path` with `suffix` appended to its file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn finish<C: Serialize>(
    global: &GlobalArgs,
    rec: Recorder,
    seed: Option<u64>,
    config: &C,
    primary: &Path,
) -> Result<(), CliError> {
    let path = global.manifest.clone().unwrap_or_else(|| {
        if primary.is_dir() {
            primary.join("manifest.json")
        } else {
            sibling(primary, ".manifest.json")
        }
    });
    let config = serde_json::to_value(config).expect("config serializes");
    let manifest = rec.finish(seed, config)?;
    write_json(&manifest, &path)?;
    Ok(())
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"))).collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected 3 comma-separated numbers, got {}", v.len()))
}

fn read_cameras(rec: &mut Recorder, path: &Path) -> Result<Vec<CameraPose>, CliError> {
    let records: Vec<CameraRecord> = read_json_input(rec, path)?;
    records.iter().map(|r| CameraPose::try_from(r).map_err(CliError::from)).collect()
}

// ---------------------------------------------------------------------------
// filter-matches

#[derive(Debug, Clone, Args)]
pub struct FlowInputs {
    #[arg(long)]
    pub flow_fwd: PathBuf,
    #[arg(long)]
    pub flow_bwd: PathBuf,
    #[arg(long)]
    pub conf_fwd: PathBuf,
    #[arg(long)]
    pub conf_bwd: PathBuf,
    /// Optional per-pixel model confidence over image A.
    #[arg(long)]
    pub model_conf: Option<PathBuf>,
}

impl FlowInputs {
    fn load(&self, rec: &mut Recorder) -> Result<FlowPair, CliError> {
        let model = match &self.model_conf {
            Some(p) => Some(read_input(rec, p)?),
            None => None,
        };
        Ok(FlowPair::new(
            read_input(rec, &self.flow_fwd)?,
            read_input(rec, &self.flow_bwd)?,
            read_input(rec, &self.conf_fwd)?,
            read_input(rec, &self.conf_bwd)?,
            model,
        )?)
    }
}

#[derive(Debug, Clone, Args)]
pub struct FilterFlags {
    #[arg(long)]
    pub cyclic_threshold_px: Option<f64>,
    #[arg(long)]
    pub min_confidence: Option<f64>,
    #[arg(long)]
    pub min_model_confidence: Option<f64>,
    #[arg(long)]
    pub max_matches: Option<usize>,
}

impl FilterFlags {
    fn apply(&self, cfg: &mut FilterConfig) {
        if let Some(v) = self.cyclic_threshold_px {
            cfg.cyclic_threshold_px = v;
        }
        if let Some(v) = self.min_confidence {
            cfg.min_confidence = v;
        }
        if let Some(v) = self.min_model_confidence {
            cfg.min_model_confidence = v;
        }
        if let Some(v) = self.max_matches {
            cfg.max_matches = v;
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct FilterArgs {
    #[command(flatten)]
    pub flows: FlowInputs,
    #[command(flatten)]
    pub flags: FilterFlags,
    /// Output CSV: row_a,col_a,row_b,col_b,residual_px,confidence.
    #[arg(long)]
    pub out: PathBuf,
}

fn filter(global: &GlobalArgs, a: FilterArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("filter-matches");
    let mut cfg: FilterConfig = load_config(global, &mut rec)?;
    a.flags.apply(&mut cfg);
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    let fp = a.flows.load(&mut rec)?;
    let set = filter_matches(&fp, &cfg)?;
    write_matches_csv(&set, &a.out)?;
    rec.output(&a.out);
    finish(global, rec, Some(cfg.seed), &cfg, &a.out)
}

// ---------------------------------------------------------------------------
// estimate-gravity

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GravityConfig {
    pub min_ground_fraction: f64,
    pub plane: PlaneRansacConfig,
    pub rays: RayConfig,
}

impl Default for GravityConfig {
    fn default() -> Self {
        Self { min_ground_fraction: 0.5, plane: PlaneRansacConfig::default(), rays: RayConfig::default() }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GravityArgs {
    /// JSON list of {xyz, observations: [{image, row, col}]}.
    #[arg(long)]
    pub points: PathBuf,
    /// Directory of Mask1 rasters named `<image id>.grr`.
    #[arg(long)]
    pub masks: PathBuf,
    /// JSON list of {id, center_xyz, rotation_quaternion_wxyz}.
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long)]
    pub plane_threshold: Option<f64>,
    #[arg(long)]
    pub min_ground_fraction: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GravityOutput {
    pub up: [f64; 3],
    pub plane: PlaneModel,
    pub ground_points: usize,
    pub plane_inliers: usize,
    /// Rotation taking the model's up vector to +z.
    pub rotation: Sim3Record,
}

fn gravity(global: &GlobalArgs, a: GravityArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("estimate-gravity");
    let mut cfg: GravityConfig = load_config(global, &mut rec)?;
    if let Some(v) = a.plane_threshold {
        cfg.plane.inlier_threshold = Some(v);
    }
    if let Some(v) = a.min_ground_fraction {
        cfg.min_ground_fraction = v;
    }
    if let Some(s) = global.seed {
        cfg.plane.seed = s;
    }
    let points: Vec<ObservedPoint> = read_json_input(&mut rec, &a.points)?;
    let cameras = read_cameras(&mut rec, &a.cameras)?;
    let entries = std::fs::read_dir(&a.masks).map_err(|e| CliError::data("io", "Io", format!("{}: {e}", a.masks.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "grr"))
        .collect();
    files.sort();
    let mut masks = BTreeMap::new();
    for f in &files {
        let id = f.file_stem().expect("file has a name").to_string_lossy().into_owned();
        masks.insert(id, read_input(&mut rec, f)?);
    }
    let ground = select_ground_points(&points, &masks, cfg.min_ground_fraction)?;
    let est = estimate_gravity(&ground, &cameras, &cfg.plane, &cfg.rays)?;
    let out = GravityOutput {
        up: [est.up.x, est.up.y, est.up.z],
        plane: est.plane,
        ground_points: ground.len(),
        plane_inliers: est.inlier_mask.iter().filter(|&&m| m).count(),
        rotation: est.rotation.to_record("model", "z_up"),
    };
    write_output(&mut rec, &out, &a.out)?;
    finish(global, rec, Some(cfg.plane.seed), &cfg, &a.out)
}

// ---------------------------------------------------------------------------
// register-air2sat

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AirSatConfig {
    pub filter: FilterConfig,
    /// `inlier_threshold` here is replaced by the fields below.
    pub ransac: RansacConfig,
    /// Inlier threshold in metres; overrides `inlier_threshold_px`.
    pub inlier_threshold_m: Option<f64>,
    /// Inlier threshold in DSM pixels.
    pub inlier_threshold_px: f64,
    pub gate: SubgraphGateConfig,
}

impl Default for AirSatConfig {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            ransac: RansacConfig::default(),
            inlier_threshold_m: None,
            inlier_threshold_px: AIR_SAT_THRESHOLD_PX,
            gate: SubgraphGateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct AirSatArgs {
    #[command(flatten)]
    pub flows: FlowInputs,
    #[command(flatten)]
    pub flags: FilterFlags,
    /// Xyz3 raster of the airborne render (image A), model frame.
    #[arg(long)]
    pub xyz: PathBuf,
    /// Dsm1 raster (image B) with a `.meta.json` sidecar holding its geotransform.
    #[arg(long)]
    pub dsm: PathBuf,
    /// RANSAC inlier threshold in metres (default: four DSM pixels).
    #[arg(long)]
    pub inlier_threshold: Option<f64>,
    /// Output Sim(3) JSON, model frame to the DSM's local ENU frame.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional statistics JSON.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Model-frame cameras to georegister.
    #[arg(long, requires = "cameras_out")]
    pub cameras: Option<PathBuf>,
    /// Geodetic camera positions {id, lat, lon, alt} after registration.
    #[arg(long, requires = "cameras")]
    pub cameras_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AirSatStats {
    pub survivors: usize,
    pub matches_used: usize,
    pub lifted: usize,
    pub dropped: usize,
    pub inlier_count: usize,
    pub inlier_fraction: f64,
    pub ransac_iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateDecision>,
}

fn air2sat(global: &GlobalArgs, a: AirSatArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("register-air2sat");
    let mut cfg: AirSatConfig = load_config(global, &mut rec)?;
    a.flags.apply(&mut cfg.filter);
    if let Some(v) = a.inlier_threshold {
        cfg.inlier_threshold_m = Some(v);
    }
    if let Some(s) = global.seed {
        cfg.filter.seed = s;
        cfg.ransac.seed = s;
    }
    let fp = a.flows.load(&mut rec)?;
    let xyz = read_input(&mut rec, &a.xyz)?;
    let dsm = read_input(&mut rec, &a.dsm)?;
    let meta_path = sidecar_path(&a.dsm);
    rec.input(&meta_path);
    let meta = read_meta(&meta_path)?;
    let geo = meta
        .geotransform
        .ok_or_else(|| CliError::data("io", "MissingGeotransform", format!("{} has no geotransform", meta_path.display())))?;
    if !(cfg.inlier_threshold_px > 0.0) {
        return Err(CliError::usage("inlier_threshold_px must be positive"));
    }
    cfg.ransac.inlier_threshold = cfg.inlier_threshold_m.unwrap_or(cfg.inlier_threshold_px * geo.ground_sample_distance());
    let res = register_air_to_sat(&fp, &xyz, &dsm, &geo, &cfg.filter, &cfg.ransac)?;
    write_output(&mut rec, &res.transform.to_record("air_model", "dsm_enu"), &a.out)?;

    let mut gate = None;
    if let (Some(cams), Some(out)) = (&a.cameras, &a.cameras_out) {
        let cameras = read_cameras(&mut rec, cams)?;
        gate = Some(gate_subgraph(cameras.len(), res.inlier_fraction, &cfg.gate));
        let geodetic: Vec<GeodeticCamera> = cameras
            .iter()
            .map(|c| {
                let g = enu_to_geodetic(&res.transform.apply(&c.center), &geo.geodetic_anchor);
                GeodeticCamera { id: c.id.clone(), lat: g.lat_deg, lon: g.lon_deg, alt: g.alt_m }
            })
            .collect();
        write_output(&mut rec, &geodetic, out)?;
    }
    if let Some(path) = &a.stats {
        let stats = AirSatStats {
            survivors: res.survivors,
            matches_used: res.matches_used,
            lifted: res.lifted,
            dropped: res.dropped,
            inlier_count: res.inlier_count,
            inlier_fraction: res.inlier_fraction,
            ransac_iterations: res.ransac_iterations,
            gate,
        };
        write_output(&mut rec, &stats, path)?;
    }
    finish(global, rec, Some(cfg.ransac.seed), &cfg, &a.out)
}

// ---------------------------------------------------------------------------
// register-ground2air

#[derive(Debug, Clone, Args)]
pub struct GroundAirArgs {
    /// `pairs.json` manifest; raster paths are relative to it.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub inlier_threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Candidate ledger JSON (default: `<out>.ledger.json`).
    #[arg(long)]
    pub ledger: Option<PathBuf>,
}

fn ground2air(global: &GlobalArgs, a: GroundAirArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("register-ground2air");
    let mut cfg: GroundToAirConfig = load_config(global, &mut rec)?;
    if let Some(v) = a.top_k {
        cfg.top_k = v;
    }
    if let Some(v) = a.inlier_threshold {
        cfg.inlier_threshold_m = v;
        cfg.ransac.inlier_threshold = v;
    }
    if let Some(s) = global.seed {
        cfg.filter.seed = s;
        cfg.ransac.seed = s;
    }
    rec.input(&a.pairs);
    let source = FilePairs::open(&a.pairs)?;
    for f in source.input_files() {
        rec.input(&f);
    }
    let res = register_ground_to_air(&source, &cfg)?;
    write_output(&mut rec, &res.transform.to_record("ground_model", "air_model"), &a.out)?;
    let ledger = a.ledger.clone().unwrap_or_else(|| sibling(&a.out, ".ledger.json"));
    write_output(&mut rec, &res.ledger(), &ledger)?;
    finish(global, rec, Some(cfg.ransac.seed), &cfg, &a.out)
}

// ---------------------------------------------------------------------------
// icp-refine

#[derive(Debug, Clone, Args)]
pub struct IcpArgs {
    /// CSV `x,y,z` or Xyz3 raster, moved by the transform.
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Initial Sim(3) JSON (default: identity).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub tukey_k: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-iteration trace JSON (default: `<out>.trace.json`).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IcpTrace {
    pub converged: bool,
    pub final_objective: f64,
    pub tukey_k: f64,
    pub correspondence_radius: f64,
    pub iterations: Vec<IcpIterate>,
}

fn icp(global: &GlobalArgs, a: IcpArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("icp-refine");
    let mut cfg: IcpConfig = load_config(global, &mut rec)?;
    if a.tukey_k.is_some() {
        cfg.tukey_k = a.tukey_k;
    }
    if a.radius.is_some() {
        cfg.correspondence_radius = a.radius;
    }
    if let Some(v) = a.max_iterations {
        cfg.max_iterations = v;
    }
    rec.input(&a.source);
    rec.input(&a.target);
    let source = read_point_cloud(&a.source)?;
    let target = read_point_cloud(&a.target)?;
    let (init, frames) = match &a.init {
        Some(p) => {
            let r: Sim3Record = read_json_input(&mut rec, p)?;
            (Sim3Transform::try_from(&r)?, (r.source_frame, r.target_frame))
        }
        None => (Sim3Transform::identity(), ("source".to_string(), "target".to_string())),
    };
    let res = icp_refine(&source, &target, &init, &cfg)?;
    write_output(&mut rec, &res.transform.to_record(&frames.0, &frames.1), &a.out)?;
    let trace = IcpTrace {
        converged: res.converged,
        final_objective: res.final_objective,
        tukey_k: res.tukey_k,
        correspondence_radius: res.correspondence_radius,
        iterations: res.trace,
    };
    let trace_path = a.trace.clone().unwrap_or_else(|| sibling(&a.out, ".trace.json"));
    write_output(&mut rec, &trace, &trace_path)?;
    finish(global, rec, None, &cfg, &a.out)
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Estimated cameras, JSON list of {id, lat, lon, alt}.
    #[arg(long)]
    pub est: PathBuf,
    /// Ground-truth cameras, same schema; matched by id.
    #[arg(long)]
    pub truth: PathBuf,
    /// DSM covariance JSON {"sigma": 3x3} in m^2 (ENU).
    #[arg(long)]
    pub cov: PathBuf,
    /// ENU anchor "lat,lon,alt" (default: mean of the truth cameras).
    #[arg(long, value_parser = parse_triple)]
    pub anchor: Option<[f64; 3]>,
    /// Scene centre "lat,lon,alt"; enables standoff normalization.
    #[arg(long, value_parser = parse_triple)]
    pub scene_center: Option<[f64; 3]>,
    /// Registration inlier fraction to carry into the report.
    #[arg(long)]
    pub inlier_fraction: Option<f64>,
    /// Report JSON (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationOutput {
    #[serde(flatten)]
    pub report: RegistrationReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_standoff_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_error_per_meter: Option<f64>,
}

fn geodetic(v: [f64; 3]) -> Result<GeodeticPoint, CliError> {
    GeodeticPoint::new(v[0], v[1], v[2]).map_err(|e| CliError::usage(e.to_string()))
}

fn eval(global: &GlobalArgs, a: EvaluateArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("evaluate");
    let est: Vec<GeodeticCamera> = read_json_input(&mut rec, &a.est)?;
    let truth: Vec<GeodeticCamera> = read_json_input(&mut rec, &a.truth)?;
    let cov: DsmCovariance = read_json_input(&mut rec, &a.cov)?;
    if truth.is_empty() {
        return Err(CliError::data("evaluate", "ShapeMismatch", "truth file lists no cameras"));
    }
    let by_id: BTreeMap<&str, &GeodeticCamera> = est.iter().map(|c| (c.id.as_str(), c)).collect();
    if by_id.len() != est.len() || est.len() != truth.len() {
        return Err(CliError::data(
            "evaluate",
            "ShapeMismatch",
            format!("{} estimated vs {} truth cameras (ids must be unique and match)", est.len(), truth.len()),
        ));
    }
    let anchor = match a.anchor {
        Some(v) => geodetic(v)?,
        None => {
            let n = truth.len() as f64;
            let sum = truth.iter().fold([0.0; 3], |s, c| [s[0] + c.lat, s[1] + c.lon, s[2] + c.alt]);
            geodetic(sum.map(|v| v / n))?
        }
    };
    let mut e = Vec::with_capacity(truth.len());
    let mut t = Vec::with_capacity(truth.len());
    for c in &truth {
        let m = by_id
            .get(c.id.as_str())
            .ok_or_else(|| CliError::data("evaluate", "ShapeMismatch", format!("no estimate for camera {:?}", c.id)))?;
        for g in [c.point(), m.point()] {
            g.validate()?;
        }
        e.push(geodetic_to_enu(&m.point(), &anchor));
        t.push(geodetic_to_enu(&c.point(), &anchor));
    }
    let mut report = evaluate(&e, &t, &cov)?;
    report.inlier_fraction = a.inlier_fraction;
    let (mut standoff, mut per_meter) = (None, None);
    if let Some(sc) = a.scene_center {
        let center = geodetic_to_enu(&geodetic(sc)?, &anchor);
        let s = mean_standoff(&t, &center);
        standoff = Some(s);
        per_meter = Some(report.relative_error_per_meter(s)?);
    }
    let out = EvaluationOutput { report, mean_standoff_m: standoff, relative_error_per_meter: per_meter };
    let cfg = serde_json::json!({"anchor": anchor});
    match &a.out {
        Some(path) => {
            write_output(&mut rec, &out, path)?;
            finish(global, rec, None, &cfg, path)
        }
        None => {
            let text = serde_json::to_string_pretty(&out).expect("report serializes");
            if let Err(e) = writeln!(std::io::stdout(), "{text}") {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(CliError::data("io", "Io", format!("stdout: {e}")));
                }
            }
            match &global.manifest {
                Some(m) => finish(global, rec, None, &cfg, m),
                None => Ok(()),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Scene specification JSON (default: built-in scene). `--config` is an alias.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Add the default ground-to-air scene when the spec has none.
    #[arg(long)]
    pub with_ground: bool,
    /// Add the default gravity scene when the spec has none.
    #[arg(long)]
    pub with_gravity: bool,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

fn synth(global: &GlobalArgs, a: SynthArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("synth");
    let mut spec: SceneSpec = match a.spec.as_ref().or(global.config.as_ref()) {
        Some(p) => read_json_input(&mut rec, p)?,
        None => SceneSpec::default(),
    };
    if let Some(s) = global.seed {
        spec.seed = s;
    }
    if a.with_ground && spec.ground.is_none() {
        spec.ground = Some(GroundSpec::default());
    }
    if a.with_gravity && spec.gravity.is_none() {
        spec.gravity = Some(GravitySpec { seed: spec.seed, ..Default::default() });
    }
    validate_spec(&spec)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::data("io", "Io", format!("{}: {e}", a.out.display())))?;
    let bundle = generate_scene(&spec);
    write_scene(&bundle, &a.out)?;
    let mut written = Vec::new();
    collect_files(&a.out, &mut written)?;
    written.sort();
    for f in written.iter().filter(|f| f.file_name().is_some_and(|n| n != "manifest.json")) {
        rec.output(f);
    }
    finish(global, rec, Some(spec.seed), &spec, &a.out)
}

fn validate_spec(spec: &SceneSpec) -> Result<(), CliError> {
    let bad = |m: &str| Err(CliError::usage(format!("scene spec: {m}")));
    if !(spec.extent_m > 0.0 && spec.dsm_pixel_m > 0.0) || spec.extent_m / spec.dsm_pixel_m < 40.0 {
        return bad("extent_m and dsm_pixel_m must be positive with at least 40 pixels across");
    }
    if !(0.0..1.0).contains(&spec.noise.outlier_fraction) || !(spec.noise.flow_jitter_px >= 0.0) {
        return bad("outlier_fraction must be in [0, 1) and flow_jitter_px >= 0");
    }
    if spec.dsm_sigma_m.iter().any(|s| !(*s > 0.0)) {
        return bad("dsm_sigma_m entries must be positive");
    }
    Sim3Transform::try_from(&spec.air_to_geo).map_err(|e| CliError::usage(format!("scene spec air_to_geo: {e}")))?;
    if let Some(g) = &spec.ground {
        Sim3Transform::try_from(&g.ground_to_air).map_err(|e| CliError::usage(format!("scene spec ground_to_air: {e}")))?;
        if g.images == 0 || g.tile_size == 0 || g.tile_size > g.render_resolution || g.render_id > 8 {
            return bad("ground: images and tile_size must be positive, tile_size <= render_resolution, render_id <= 8");
        }
    }
    spec.anchor.validate().map_err(|e| CliError::usage(format!("scene spec anchor: {e}")))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::data("io", "Io", format!("{}: {e}", dir.display()));
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// tile-plan

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilePlanConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub tile_size: usize,
    pub overlap_fraction: f64,
    pub render_ids: Vec<u32>,
}

impl Default for TilePlanConfig {
    fn default() -> Self {
        Self { image_height: 2048, image_width: 2048, tile_size: 300, overlap_fraction: 0.25, render_ids: (0..9).collect() }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TilePlanArgs {
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub tile_size: Option<usize>,
    #[arg(long)]
    pub overlap: Option<f64>,
    /// Number of renders, ids 0..N.
    #[arg(long)]
    pub renders: Option<u32>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TilePlan {
    pub count: usize,
    pub tiles: Vec<Tile>,
}

fn tile_plan(global: &GlobalArgs, a: TilePlanArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("tile-plan");
    let mut cfg: TilePlanConfig = load_config(global, &mut rec)?;
    if let Some(v) = a.height {
        cfg.image_height = v;
    }
    if let Some(v) = a.width {
        cfg.image_width = v;
    }
    if let Some(v) = a.tile_size {
        cfg.tile_size = v;
    }
    if let Some(v) = a.overlap {
        cfg.overlap_fraction = v;
    }
    if let Some(n) = a.renders {
        cfg.render_ids = (0..n).collect();
    }
    let tiles = plan_tiles(&cfg.render_ids, cfg.image_height, cfg.image_width, cfg.tile_size, cfg.overlap_fraction)?;
    write_output(&mut rec, &TilePlan { count: tiles.len(), tiles }, &a.out)?;
    finish(global, rec, None, &cfg, &a.out)
}

// ---------------------------------------------------------------------------
// oblique-poses

#[derive(Debug, Clone, Args)]
pub struct ObliqueArgs {
    /// Scene centre "x,y,z" in the model frame.
    #[arg(long, value_parser = parse_triple)]
    pub center: [f64; 3],
    #[arg(long)]
    pub radius: f64,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub depression_deg: Option<f64>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub no_nadir: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn oblique(global: &GlobalArgs, a: ObliqueArgs) -> Result<(), CliError> {
    let mut rec = Recorder::new("oblique-poses");
    let mut cfg: ObliqueViewConfig = load_config(global, &mut rec)?;
    if let Some(v) = a.count {
        cfg.count = v;
        cfg.azimuth_step_deg = 360.0 / v.max(1) as f64;
    }
    if let Some(v) = a.depression_deg {
        cfg.depression_deg = v;
    }
    if let Some(v) = a.resolution {
        cfg.resolution_px = v;
    }
    if a.no_nadir {
        cfg.include_nadir = false;
    }
    let set = oblique_poses(&Vec3::from(a.center), a.radius, &cfg)?;
    let records: Vec<RenderPoseRecord> = set.poses.iter().map(|p| p.to_record()).collect();
    write_output(&mut rec, &records, &a.out)?;
    let snapshot = serde_json::json!({"center": a.center, "radius": a.radius, "views": cfg});
    finish(global, rec, None, &snapshot, &a.out)
}
