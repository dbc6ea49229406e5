//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use mrfmap::baseline_logodds::LogOddsConfig;
use mrfmap::dataset_io::{
    save_image_list, save_intrinsics, save_trajectory, Dataset, DatasetError, DepthImage, Frame, Keyframe,
    KeyframePolicy, StampedPose, SyntheticScene, render_synthetic_depth,
};
use mrfmap::map_eval::{
    accuracy_score, evaluate_image, mean_std, write_classification_png, write_scores_csv, write_summary_json,
    AccuracyReport, AccuracySummary, BandMode, EvalConfig, EvalError, EvalImage, EvalSigma, MeanStd,
};
use mrfmap::map_io::ProbabilityMap;
use mrfmap::pipeline::{leave_one_out_with, BuildLog, MapBuilder, Method, PipelineError};
use mrfmap::ray_mrf::{InferenceConfig, MrfError};
use mrfmap::sensor_model::{fit_calibration, simulate_noisy_depth, CalibrationSample, SensorModelError};
use mrfmap::{CameraIntrinsics, GridConfig, SensorNoiseModel};

use crate::config::{
    DatasetArgs, EvalArgs, EvalDepthArg, FileConfig, GridArgs, LogOddsArgs, MethodArg, MrfArgs,
};
use crate::CliError;

pub const DEFAULT_RESOLUTION: f64 = 0.05;
pub const DEFAULT_BRICK_SIZE: u32 = 8;
pub const DEFAULT_MAX_GAP: f64 = 0.02;
pub const DEFAULT_SIGMA: f64 = 0.01;
pub const DEFAULT_BAND_K: f64 = 1.5;
/// Depth range of constant-σ models, in meters.
pub const CONSTANT_MODEL_RANGE: (f64, f64) = (0.1, 10.0);
pub const MAP_FILE: &str = "map.mrfm";
pub const BUILD_LOG_FILE: &str = "build.json";
pub const NOISE_MODEL_FILE: &str = "noise_model.json";

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn pipeline_err(e: PipelineError) -> CliError {
    use mrfmap::baseline_logodds::LogOddsError;
    match e {
        PipelineError::Mrf(MrfError::InvalidConfig(_))
        | PipelineError::LogOdds(LogOddsError::InvalidConfig(_))
        | PipelineError::Eval(EvalError::InvalidConfig(_)) => CliError::Config(e.to_string()),
        PipelineError::Mrf(MrfError::ImageMismatch { .. })
        | PipelineError::LogOdds(LogOddsError::ImageMismatch { .. })
        | PipelineError::Eval(EvalError::ImageMismatch { .. } | EvalError::NothingScored)
        | PipelineError::NoKeyframes
        | PipelineError::TooFewForLeaveOneOut(_)
        | PipelineError::EvalCountMismatch(..) => CliError::Data(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

fn eval_err(e: EvalError) -> CliError {
    match e {
        EvalError::InvalidConfig(_) => CliError::Config(e.to_string()),
        EvalError::Io { .. } | EvalError::Encode(_) => CliError::Runtime(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(io_at(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io_at(path))
}

fn require_output(output: Option<PathBuf>) -> Result<PathBuf, CliError> {
    output.ok_or_else(|| CliError::Config("an output directory is required (-o/--output)".into()))
}

// ---------------------------------------------------------------------------
// Shared resolution of flags, config file and dataset contents.

pub fn load_dataset(args: &DatasetArgs) -> Result<Dataset, CliError> {
    let root = args.dataset.as_ref().ok_or_else(|| CliError::Config("--dataset is required".into()))?;
    Dataset::load(root, args.max_gap.unwrap_or(DEFAULT_MAX_GAP)).map_err(data)
}

pub fn keyframe_policy(args: &DatasetArgs) -> KeyframePolicy {
    let d = KeyframePolicy::default();
    KeyframePolicy { tau_trans: args.tau_trans.unwrap_or(d.tau_trans), tau_rot: args.tau_rot.unwrap_or(d.tau_rot) }
}

pub fn load_keyframes(args: &DatasetArgs, ds: &Dataset) -> Result<Vec<Keyframe>, CliError> {
    let kfs = ds.keyframes(&keyframe_policy(args)).map_err(data)?;
    if kfs.is_empty() {
        return Err(CliError::Data(format!("{}: no depth frames with an associated pose", ds.root.display())));
    }
    Ok(kfs)
}

pub fn grid_config(args: &GridArgs, ds: &Dataset, resolution: Option<f64>) -> Result<GridConfig, CliError> {
    let (min, max) = match &args.bounds {
        Some(b) if b.len() == 6 => ([b[0], b[1], b[2]], [b[3], b[4], b[5]]),
        Some(b) => return Err(CliError::Config(format!("--bounds needs 6 values, got {}", b.len()))),
        None => match &ds.volume {
            Some(v) => (v.min, v.max),
            None => {
                return Err(CliError::Config(format!(
                    "no --bounds given and {} has no volume.json",
                    ds.root.display()
                )))
            }
        },
    };
    let side = resolution.or(args.resolution).unwrap_or(DEFAULT_RESOLUTION);
    GridConfig::from_bounds(min, max, side, args.brick_size.unwrap_or(DEFAULT_BRICK_SIZE))
        .map_err(|e| CliError::Config(e.to_string()))
}

fn load_model(path: &Path) -> Result<SensorNoiseModel, CliError> {
    SensorNoiseModel::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn check_model(model: SensorNoiseModel, intr: &CameraIntrinsics) -> Result<SensorNoiseModel, CliError> {
    if model.image_size() != (intr.width, intr.height) {
        return Err(CliError::Data(format!(
            "noise model covers {:?} pixels, images are {:?}",
            model.image_size(),
            (intr.width, intr.height)
        )));
    }
    Ok(model)
}

fn constant_model(sigma: f64, intr: &CameraIntrinsics) -> Result<SensorNoiseModel, CliError> {
    let (lo, hi) = CONSTANT_MODEL_RANGE;
    SensorNoiseModel::constant(sigma, intr.width, intr.height, lo, hi).map_err(|e| CliError::Config(e.to_string()))
}

/// Noise model from `--noise-model`, `--sigma`, the dataset's
/// `noise_model.json`, or a constant default, in that order.
pub fn noise_model(args: &MrfArgs, ds: &Dataset) -> Result<SensorNoiseModel, CliError> {
    let intr = &ds.intrinsics;
    let model = if let Some(p) = &args.noise_model {
        load_model(p)?
    } else if let Some(s) = args.sigma {
        constant_model(s, intr)?
    } else if ds.root.join(NOISE_MODEL_FILE).exists() {
        load_model(&ds.root.join(NOISE_MODEL_FILE))?
    } else {
        log::warn!("no noise model given; using constant σ = {DEFAULT_SIGMA} m");
        constant_model(DEFAULT_SIGMA, intr)?
    };
    check_model(model, intr)
}

pub fn inference_config(args: &MrfArgs) -> InferenceConfig {
    let d = InferenceConfig::default();
    InferenceConfig {
        prior: args.prior.unwrap_or(d.prior),
        passes: args.passes.unwrap_or(d.passes),
        sigma_cutoff: args.sigma_cutoff.unwrap_or(d.sigma_cutoff),
        weighting: args.weighting.map_or(d.weighting, Into::into),
        ..d
    }
}

pub fn logodds_config(args: &LogOddsArgs) -> LogOddsConfig {
    let d = LogOddsConfig::default();
    LogOddsConfig {
        p_hit: args.p_hit.unwrap_or(d.p_hit),
        p_miss: args.p_miss.unwrap_or(d.p_miss),
        clamp_min: args.clamp_min.unwrap_or(d.clamp_min),
        clamp_max: args.clamp_max.unwrap_or(d.clamp_max),
        max_range: args.max_range.or(d.max_range),
    }
}

pub fn map_builder(
    method: Method,
    mrf: &MrfArgs,
    logodds: &LogOddsArgs,
    ds: &Dataset,
) -> Result<MapBuilder, CliError> {
    Ok(match method {
        Method::Mrf => MapBuilder::Mrf { model: noise_model(mrf, ds)?, config: inference_config(mrf) },
        Method::LogOdds => MapBuilder::LogOdds { config: logodds_config(logodds) },
    })
}

/// σ for the accuracy band: `--eval-sigma`, `--eval-noise-model`, or the
/// build noise model.
pub fn eval_config(args: &EvalArgs, mrf: &MrfArgs, ds: &Dataset) -> Result<EvalConfig, CliError> {
    let sigma = if let Some(s) = args.eval_sigma {
        EvalSigma::Constant(s)
    } else if let Some(p) = &args.eval_noise_model {
        EvalSigma::Model(check_model(load_model(p)?, &ds.intrinsics)?)
    } else {
        EvalSigma::Model(noise_model(mrf, ds)?)
    };
    let mut cfg = EvalConfig::new(sigma);
    cfg.band = BandMode::SigmaBand { k: args.band_k.unwrap_or(DEFAULT_BAND_K) };
    if let Some(u) = args.unknown {
        cfg.unknown = u.into();
    }
    if let Some(t) = args.vis_threshold {
        cfg.vis_boundary_threshold = t;
    }
    cfg.validate().map_err(eval_err)?;
    Ok(cfg)
}

/// Depth image to score frame `frame` against.
fn eval_depth(ds: &Dataset, frame: &Frame, which: EvalDepthArg) -> Result<DepthImage, CliError> {
    let gt = ds.gt_frames.as_ref().and_then(|g| g.iter().find(|f| (f.timestamp - frame.timestamp).abs() < 1e-6));
    match (which, gt) {
        (EvalDepthArg::Measured, _) | (EvalDepthArg::Auto, None) => ds.load_depth(frame).map_err(data),
        (_, Some(g)) => ds.load_depth(g).map_err(data),
        (EvalDepthArg::Gt, None) => Err(CliError::Data(format!(
            "{}: no ground-truth image for t = {}",
            ds.root.display(),
            frame.timestamp
        ))),
    }
}

// ---------------------------------------------------------------------------
// build

#[derive(Debug, Clone, Default, Args)]
pub struct BuildArgs {
    /// Mapping method [default: mrf].
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Output directory for map.mrfm and build.json.
    #[arg(short, long, value_name = "DIR")]
    pub output: Option<PathBuf>,
    /// Seed recorded in the build log; building itself draws no random numbers.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub mrf: MrfArgs,
    #[command(flatten)]
    pub logodds: LogOddsArgs,
}

impl BuildArgs {
    pub fn layered(self, file: &FileConfig) -> Self {
        let f = file.clone();
        Self {
            method: self.method.or(f.method),
            output: self.output.or(f.output),
            seed: self.seed.or(f.seed),
            dataset: self.dataset.or(f.dataset),
            grid: self.grid.or(f.grid),
            mrf: self.mrf.or(f.mrf),
            logodds: self.logodds.or(f.logodds),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct BuildRecord<'a> {
    pub dataset: &'a Path,
    pub seed: Option<u64>,
    pub keyframes_used: Vec<u32>,
    #[serde(flatten)]
    pub log: &'a BuildLog,
}

#[derive(Debug, Clone)]
pub struct BuildOutputs {
    pub map: PathBuf,
    pub log: PathBuf,
    pub build_log: BuildLog,
}

pub fn cmd_build(args: BuildArgs) -> Result<BuildOutputs, CliError> {
    let out = require_output(args.output.clone())?;
    let method: Method = args.method.unwrap_or(MethodArg::Mrf).into();
    let ds = load_dataset(&args.dataset)?;
    let grid = grid_config(&args.grid, &ds, None)?;
    let builder = map_builder(method, &args.mrf, &args.logodds, &ds)?;
    let kfs = load_keyframes(&args.dataset, &ds)?;
    log::info!("building {} map from {} keyframes, {:?} voxels", method.name(), kfs.len(), grid.dims);
    let (map, build_log) = builder.build(grid, &ds.intrinsics, &kfs).map_err(pipeline_err)?;

    create_dir(&out)?;
    let map_path = out.join(MAP_FILE);
    map.save(&map_path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let log_path = out.join(BUILD_LOG_FILE);
    let record = BuildRecord {
        dataset: &ds.root,
        seed: args.seed,
        keyframes_used: kfs.iter().map(|k| k.id).collect(),
        log: &build_log,
    };
    write_json(&log_path, &record)?;
    log::info!("wrote {} ({:.2} s)", map_path.display(), build_log.seconds);
    Ok(BuildOutputs { map: map_path, log: log_path, build_log })
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, Default, Args)]
pub struct EvalCmdArgs {
    /// Map file to score (not used with --leave-one-out).
    #[arg(long, value_name = "FILE")]
    pub map: Option<PathBuf>,
    /// Hold out each keyframe in turn, build from the rest and score only it.
    #[arg(long)]
    pub leave_one_out: bool,
    /// Mapping method for --leave-one-out [default: mrf].
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Also write a classification PNG per scored image.
    #[arg(long)]
    pub png: bool,
    /// Output directory for scores.csv, summary.json and PNGs.
    #[arg(short, long, value_name = "DIR")]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub mrf: MrfArgs,
    #[command(flatten)]
    pub logodds: LogOddsArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
}

impl EvalCmdArgs {
    pub fn layered(self, file: &FileConfig) -> Self {
        let f = file.clone();
        Self {
            map: self.map,
            leave_one_out: self.leave_one_out,
            method: self.method.or(f.method),
            png: self.png,
            output: self.output.or(f.output),
            dataset: self.dataset.or(f.dataset),
            grid: self.grid.or(f.grid),
            mrf: self.mrf.or(f.mrf),
            logodds: self.logodds.or(f.logodds),
            eval: self.eval.or(f.eval),
        }
    }
}

pub const SCORES_FILE: &str = "scores.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CLASSIFICATION_DIR: &str = "classification";

pub fn cmd_eval(args: EvalCmdArgs) -> Result<AccuracyReport, CliError> {
    let out = require_output(args.output.clone())?;
    let ds = load_dataset(&args.dataset)?;
    let cfg = eval_config(&args.eval, &args.mrf, &ds)?;
    let which = args.eval.eval_depth.unwrap_or(EvalDepthArg::Auto);
    create_dir(&out)?;
    let png_dir = out.join(CLASSIFICATION_DIR);
    if args.png {
        create_dir(&png_dir)?;
    }
    let png = |map: &ProbabilityMap, id: &str, pose, depth: &DepthImage| -> Result<(), CliError> {
        let e = evaluate_image(map, &ds.intrinsics, pose, depth, &cfg);
        write_classification_png(&png_dir.join(format!("{id}.png")), &e).map_err(eval_err)
    };

    let (report, side) = if args.leave_one_out {
        if args.map.is_some() {
            return Err(CliError::Config("--map and --leave-one-out are mutually exclusive".into()));
        }
        let method: Method = args.method.unwrap_or(MethodArg::Mrf).into();
        let grid = grid_config(&args.grid, &ds, None)?;
        let builder = map_builder(method, &args.mrf, &args.logodds, &ds)?;
        let kfs = load_keyframes(&args.dataset, &ds)?;
        let depths = kfs
            .iter()
            .map(|k| eval_depth(&ds, &ds.frames[k.id as usize], which))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&DepthImage> = depths.iter().collect();
        let mut png_result = Ok(());
        let report = leave_one_out_with(&builder, grid, &ds.intrinsics, &kfs, &refs, &cfg, |k, map| {
            if args.png && png_result.is_ok() {
                png_result = png(map, &kfs[k].id.to_string(), &kfs[k].pose, &depths[k]);
            }
        })
        .map_err(pipeline_err)?;
        png_result?;
        (report, grid.voxel_side)
    } else {
        let path = args.map.as_ref().ok_or_else(|| CliError::Config("--map or --leave-one-out is required".into()))?;
        let map = ProbabilityMap::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let depths = ds
            .frames
            .iter()
            .map(|f| eval_depth(&ds, f, which))
            .collect::<Result<Vec<_>, _>>()?;
        let images: Vec<EvalImage> = ds
            .frames
            .iter()
            .zip(&depths)
            .enumerate()
            .map(|(i, (f, d))| EvalImage { id: i.to_string(), pose: f.pose, depth: d })
            .collect();
        let report = accuracy_score(&map, &ds.intrinsics, &images, &cfg).map_err(eval_err)?;
        if args.png {
            for img in &images {
                png(&map, &img.id, &img.pose, img.depth)?;
            }
        }
        (report, map.config().voxel_side)
    };

    write_scores_csv(&out.join(SCORES_FILE), &report.images).map_err(eval_err)?;
    write_summary_json(&out.join(SUMMARY_FILE), &AccuracySummary::from_report(&report, side)).map_err(eval_err)?;
    println!("accuracy {:.4} ± {:.4} over {} images", report.mean, report.std, report.images.len());
    Ok(report)
}

// ---------------------------------------------------------------------------
// calibrate

#[derive(Debug, Clone, Default, Args)]
pub struct CalibrateArgs {
    /// CSV with header u,v,z_meas,z_gt (pixels, meters, meters).
    #[arg(long, value_name = "FILE")]
    pub samples: PathBuf,
    /// Image width, in pixels.
    #[arg(long, value_name = "PX")]
    pub width: u32,
    /// Image height, in pixels.
    #[arg(long, value_name = "PX")]
    pub height: u32,
    /// Patch edge length, in pixels [default: 20].
    #[arg(long, value_name = "PX")]
    pub patch_size: Option<u32>,
    /// Output directory for noise_model.json and fit_diagnostics.json.
    #[arg(short, long, value_name = "DIR")]
    pub output: Option<PathBuf>,
}

pub const DIAGNOSTICS_FILE: &str = "fit_diagnostics.json";

pub fn read_samples(path: &Path) -> Result<Vec<CalibrationSample>, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut samples = Vec::new();
    for (i, row) in r.deserialize::<CalibrationSample>().enumerate() {
        // Row 1 is the first data row after the header.
        let s = row.map_err(|e| CliError::Data(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        samples.push(s);
    }
    Ok(samples)
}

pub fn cmd_calibrate(args: CalibrateArgs) -> Result<SensorNoiseModel, CliError> {
    let out = require_output(args.output.clone())?;
    let samples = read_samples(&args.samples)?;
    let patch = args.patch_size.unwrap_or(mrfmap::sensor_model::DEFAULT_PATCH_SIZE);
    let (model, diag) = fit_calibration(&samples, args.width, args.height, patch).map_err(|e| match e {
        SensorModelError::Invalid(_) => CliError::Config(e.to_string()),
        _ => CliError::Data(e.to_string()),
    })?;
    create_dir(&out)?;
    model.save(&out.join(NOISE_MODEL_FILE)).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_json(&out.join(DIAGNOSTICS_FILE), &diag)?;
    let fitted = diag.patches.iter().filter(|p| p.fitted).count();
    println!(
        "aggregate from {} samples ({}); {fitted}/{} patches fitted",
        diag.aggregate_samples,
        diag.aggregate_source,
        diag.patches.len()
    );
    Ok(model)
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Debug, Clone, Default, Args)]
pub struct SimulateArgs {
    /// Scene JSON with boxes, planes, cameras and an optional volume (meters).
    #[arg(long, value_name = "FILE")]
    pub scene: PathBuf,
    /// Camera intrinsics JSON (pixels; depth_scale in raw units per meter).
    #[arg(long, value_name = "FILE")]
    pub intrinsics: PathBuf,
    /// Noise model JSON; without it the noisy images equal the ground truth.
    #[arg(long, value_name = "FILE")]
    pub noise_model: Option<PathBuf>,
    /// Seed for noise sampling; required with --noise-model.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output dataset directory.
    #[arg(short, long, value_name = "DIR")]
    pub output: Option<PathBuf>,
}

/// Seconds between simulated frames.
pub const FRAME_PERIOD: f64 = 1.0;

pub fn cmd_simulate(args: SimulateArgs) -> Result<PathBuf, CliError> {
    let out = require_output(args.output.clone())?;
    let scene = SyntheticScene::load(&args.scene).map_err(|e| match e {
        DatasetError::Io { .. } => data(e),
        _ => CliError::Config(e.to_string()),
    })?;
    if scene.cameras.is_empty() {
        return Err(CliError::Config(format!("{}: scene has no cameras", args.scene.display())));
    }
    let intr = mrfmap::dataset_io::load_intrinsics(&args.intrinsics).map_err(|e| match e {
        DatasetError::Io { .. } => data(e),
        _ => CliError::Config(e.to_string()),
    })?;
    let noise = match &args.noise_model {
        Some(p) => {
            let seed = args.seed.ok_or_else(|| CliError::Config("--seed is required with --noise-model".into()))?;
            Some((check_model(load_model(p)?, &intr)?, seed))
        }
        None => None,
    };
    let poses = scene
        .cameras
        .iter()
        .map(|c| c.pose().map_err(|e| CliError::Config(format!("{}: {e}", args.scene.display()))))
        .collect::<Result<Vec<_>, _>>()?;

    for d in ["gt", "noisy"] {
        create_dir(&out.join(d))?;
    }
    let mut trajectory = Vec::new();
    let (mut gt_list, mut noisy_list) = (Vec::new(), Vec::new());
    for (i, pose) in poses.iter().enumerate() {
        let t = i as f64 * FRAME_PERIOD;
        let name = format!("{i:06}.png");
        let gt = render_synthetic_depth(&scene, &intr, pose);
        let noisy = match &noise {
            Some((model, seed)) => simulate_noisy_depth(model, &intr, &gt, seed.wrapping_add(i as u64)),
            None => gt.clone(),
        };
        gt.save_png(&out.join("gt").join(&name)).map_err(|e| CliError::Runtime(e.to_string()))?;
        noisy.save_png(&out.join("noisy").join(&name)).map_err(|e| CliError::Runtime(e.to_string()))?;
        trajectory.push(StampedPose { timestamp: t, pose: *pose });
        gt_list.push((t, format!("gt/{name}")));
        noisy_list.push((t, format!("noisy/{name}")));
    }
    let rt = |e: DatasetError| CliError::Runtime(e.to_string());
    save_trajectory(&out.join("trajectory.txt"), &trajectory).map_err(rt)?;
    save_image_list(&out.join("depth.txt"), &noisy_list).map_err(rt)?;
    save_image_list(&out.join("depth_gt.txt"), &gt_list).map_err(rt)?;
    save_intrinsics(&out.join("intrinsics.json"), &intr).map_err(rt)?;
    if let Some(v) = &scene.volume {
        write_json(&out.join("volume.json"), v)?;
    }
    if let Some((model, _)) = &noise {
        model.save(&out.join(NOISE_MODEL_FILE)).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    println!("wrote {} frames to {}", poses.len(), out.display());
    Ok(out)
}

// ---------------------------------------------------------------------------
// compare

#[derive(Debug, Clone, Default, Args)]
pub struct CompareArgs {
    /// Voxel sides to compare, in meters, comma separated [default: --resolution].
    #[arg(long, value_name = "M,...", value_delimiter = ',')]
    pub resolutions: Option<Vec<f64>>,
    /// Methods to compare, comma separated [default: mrf,logodds].
    #[arg(long, value_enum, value_delimiter = ',')]
    pub methods: Option<Vec<MethodArg>>,
    /// Output directory for compare.csv and compare.txt.
    #[arg(short, long, value_name = "DIR")]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub mrf: MrfArgs,
    #[command(flatten)]
    pub logodds: LogOddsArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
}

impl CompareArgs {
    pub fn layered(self, file: &FileConfig) -> Self {
        let f = file.clone();
        Self {
            resolutions: self.resolutions.or(f.resolutions),
            methods: self.methods.or(f.methods),
            output: self.output.or(f.output),
            dataset: self.dataset.or(f.dataset),
            grid: self.grid.or(f.grid),
            mrf: self.mrf.or(f.mrf),
            logodds: self.logodds.or(f.logodds),
            eval: self.eval.or(f.eval),
        }
    }
}

/// One cell of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub resolution: f64,
    pub method: Method,
    pub mean: f64,
    pub std: f64,
    pub images: usize,
}

pub const COMPARE_CSV: &str = "compare.csv";
pub const COMPARE_TXT: &str = "compare.txt";

pub fn write_compare_csv(path: &Path, rows: &[CompareRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(io_at(path))
}

pub fn read_compare_csv(path: &Path) -> Result<Vec<CompareRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Per-method summaries keyed by method name.
pub fn summaries_from_rows(rows: &[CompareRow]) -> BTreeMap<String, AccuracySummary> {
    let mut out: BTreeMap<String, AccuracySummary> = BTreeMap::new();
    for r in rows {
        let s = out.entry(r.method.name().to_string()).or_insert_with(|| AccuracySummary {
            mean: f64::NAN,
            std: f64::NAN,
            images: 0,
            skipped: Vec::new(),
            per_resolution: BTreeMap::new(),
        });
        s.images += r.images;
        s.per_resolution.insert(mrfmap::map_eval::resolution_key(r.resolution), MeanStd { mean: r.mean, std: r.std });
    }
    for s in out.values_mut() {
        let means: Vec<f64> = s.per_resolution.values().map(|m| m.mean).collect();
        (s.mean, s.std) = mean_std(&means);
    }
    out
}

/// Aligned text table: one row per resolution, one column per method.
pub fn format_compare_table(rows: &[CompareRow]) -> String {
    let mut methods: Vec<Method> = Vec::new();
    let mut resolutions: Vec<f64> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
        if !resolutions.contains(&r.resolution) {
            resolutions.push(r.resolution);
        }
    }
    let cell = |res: f64, m: Method| {
        rows.iter()
            .find(|r| r.resolution == res && r.method == m)
            .map_or_else(|| "-".to_string(), |r| format!("{:.3} ± {:.3}", r.mean, r.std))
    };
    let mut s = format!("{:>12}", "resolution");
    for m in &methods {
        write!(s, "  {:>15}", m.name()).unwrap();
    }
    s.push('\n');
    for &res in &resolutions {
        write!(s, "{:>12}", format!("{res} m")).unwrap();
        for &m in &methods {
            write!(s, "  {:>15}", cell(res, m)).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn cmd_compare(args: CompareArgs) -> Result<Vec<CompareRow>, CliError> {
    let out = require_output(args.output.clone())?;
    let ds = load_dataset(&args.dataset)?;
    let kfs = load_keyframes(&args.dataset, &ds)?;
    let cfg = eval_config(&args.eval, &args.mrf, &ds)?;
    let which = args.eval.eval_depth.unwrap_or(EvalDepthArg::Auto);
    let depths = kfs
        .iter()
        .map(|k| eval_depth(&ds, &ds.frames[k.id as usize], which))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&DepthImage> = depths.iter().collect();
    let resolutions = args.resolutions.clone().unwrap_or_else(|| vec![args.grid.resolution.unwrap_or(DEFAULT_RESOLUTION)]);
    let methods = args.methods.clone().unwrap_or_else(|| vec![MethodArg::Mrf, MethodArg::Logodds]);
    if resolutions.is_empty() || methods.is_empty() {
        return Err(CliError::Config("need at least one resolution and one method".into()));
    }

    let mut rows = Vec::new();
    for &res in &resolutions {
        let grid = grid_config(&args.grid, &ds, Some(res))?;
        for &m in &methods {
            let method: Method = m.into();
            let builder = map_builder(method, &args.mrf, &args.logodds, &ds)?;
            let report = leave_one_out_with(&builder, grid, &ds.intrinsics, &kfs, &refs, &cfg, |_, _| {})
                .map_err(pipeline_err)?;
            log::info!("{} at {res} m: {:.4} ± {:.4}", method.name(), report.mean, report.std);
            rows.push(CompareRow { resolution: res, method, mean: report.mean, std: report.std, images: report.images.len() });
        }
    }
    create_dir(&out)?;
    write_compare_csv(&out.join(COMPARE_CSV), &rows)?;
    let table = format_compare_table(&rows);
    std::fs::write(out.join(COMPARE_TXT), &table).map_err(io_at(&out.join(COMPARE_TXT)))?;
    print!("{table}");
    Ok(rows)
}
