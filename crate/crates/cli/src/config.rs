//! Command-line flags and the JSON config file.
//!
//! Every tunable is an `Option` so that flags, the config file and built-in
//! defaults can be layered: flag, then file, then default.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use mrfmap::map_eval::UnknownSpace;
use mrfmap::pipeline::Method;
use mrfmap::ray_mrf::MessageWeighting;

use crate::CliError;

/// Fills every `None` field of `self` from `other`.
macro_rules! layer {
    ($ty:ident { $($f:ident),* $(,)? }) => {
        impl $ty {
            pub fn or(self, other: Self) -> Self {
                Self { $($f: self.$f.or(other.$f)),* }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Mrf,
    Logodds,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Mrf => Method::Mrf,
            MethodArg::Logodds => Method::LogOdds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingArg {
    Uniform,
    Length,
}

impl From<WeightingArg> for MessageWeighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Uniform => MessageWeighting::Uniform,
            WeightingArg::Length => MessageWeighting::Length,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnknownArg {
    Transparent,
    Prior,
}

impl From<UnknownArg> for UnknownSpace {
    fn from(u: UnknownArg) -> Self {
        match u {
            UnknownArg::Transparent => UnknownSpace::Transparent,
            UnknownArg::Prior => UnknownSpace::Prior,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalDepthArg {
    /// Ground-truth images when the dataset has them, measured otherwise.
    Auto,
    Gt,
    Measured,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetArgs {
    /// Dataset directory (intrinsics.json, trajectory.txt, depth.txt).
    #[arg(long = "dataset", value_name = "DIR")]
    #[serde(rename = "path")]
    pub dataset: Option<PathBuf>,
    /// Maximum image-to-pose timestamp gap, in seconds [default: 0.02].
    #[arg(long, value_name = "S")]
    pub max_gap: Option<f64>,
    /// Keyframe translation threshold, in meters [default: 1.0].
    #[arg(long, value_name = "M")]
    pub tau_trans: Option<f64>,
    /// Keyframe rotation threshold (geodesic angle), in radians [default: 1.0].
    #[arg(long, value_name = "RAD")]
    pub tau_rot: Option<f64>,
}
layer!(DatasetArgs { dataset, max_gap, tau_trans, tau_rot });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridArgs {
    /// Voxel side length, in meters [default: 0.05].
    #[arg(long, value_name = "M")]
    pub resolution: Option<f64>,
    /// Brick edge length, in voxels [default: 8].
    #[arg(long, value_name = "VOXELS")]
    pub brick_size: Option<u32>,
    /// Mapped volume as min_x,min_y,min_z,max_x,max_y,max_z, in meters
    /// [default: the dataset's volume.json].
    #[arg(long, value_name = "M,M,M,M,M,M", value_delimiter = ',', allow_hyphen_values = true)]
    pub bounds: Option<Vec<f64>>,
}
layer!(GridArgs { resolution, brick_size, bounds });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrfArgs {
    /// Inference passes over all keyframes [default: 3].
    #[arg(long, value_name = "N")]
    pub passes: Option<u32>,
    /// Prior occupancy probability, unitless in (0, 1) [default: 0.1].
    #[arg(long, value_name = "P")]
    pub prior: Option<f64>,
    /// Ray extent past the measurement, in multiples of σ [default: 3].
    #[arg(long, value_name = "K")]
    pub sigma_cutoff: Option<f64>,
    /// Weight of each ray in its keyframe's message average [default: length].
    #[arg(long, value_enum)]
    pub weighting: Option<WeightingArg>,
    /// Sensor noise model JSON [default: the dataset's noise_model.json].
    #[arg(long, value_name = "FILE")]
    pub noise_model: Option<PathBuf>,
    /// Constant noise σ used instead of a noise model, in meters.
    #[arg(long, value_name = "M")]
    pub sigma: Option<f64>,
}
layer!(MrfArgs { passes, prior, sigma_cutoff, weighting, noise_model, sigma });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogOddsArgs {
    /// Hit probability of the log-odds baseline [default: 0.7].
    #[arg(long, value_name = "P")]
    pub p_hit: Option<f64>,
    /// Miss probability of the log-odds baseline [default: 0.4].
    #[arg(long, value_name = "P")]
    pub p_miss: Option<f64>,
    /// Lower probability clamp of the log-odds baseline [default: 0.12].
    #[arg(long, value_name = "P")]
    pub clamp_min: Option<f64>,
    /// Upper probability clamp of the log-odds baseline [default: 0.97].
    #[arg(long, value_name = "P")]
    pub clamp_max: Option<f64>,
    /// Maximum integrated range of the log-odds baseline, in meters [default: none].
    #[arg(long, value_name = "M")]
    pub max_range: Option<f64>,
}
layer!(LogOddsArgs { p_hit, p_miss, clamp_min, clamp_max, max_range });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    /// Accuracy band half-width, in multiples of σ(measured depth) [default: 1.5].
    #[arg(long, value_name = "K")]
    pub band_k: Option<f64>,
    /// Occlusion of space the map knows nothing about [default: transparent].
    #[arg(long, value_enum)]
    pub unknown: Option<UnknownArg>,
    /// Visibility above which a ray is treated as leaving the map, unitless [default: 0.5].
    #[arg(long, value_name = "P")]
    pub vis_threshold: Option<f64>,
    /// Constant σ for the accuracy band, in meters [default: the build noise model].
    #[arg(long, value_name = "M")]
    pub eval_sigma: Option<f64>,
    /// Noise model JSON for the accuracy band [default: the build noise model].
    #[arg(long, value_name = "FILE")]
    pub eval_noise_model: Option<PathBuf>,
    /// Depth images to score against [default: auto].
    #[arg(long, value_enum)]
    pub eval_depth: Option<EvalDepthArg>,
}
layer!(EvalArgs { band_k, unknown, vis_threshold, eval_sigma, eval_noise_model, eval_depth });

/// Contents of a `--config` JSON file. Every key is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub method: Option<MethodArg>,
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    pub dataset: DatasetArgs,
    pub grid: GridArgs,
    pub mrf: MrfArgs,
    pub logodds: LogOddsArgs,
    pub eval: EvalArgs,
    pub resolutions: Option<Vec<f64>>,
    pub methods: Option<Vec<MethodArg>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}
