//! End-to-end map building and leave-one-out evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline_logodds::{LogOddsConfig, LogOddsError, LogOddsMap};
use crate::dataset_io::{DepthImage, Keyframe};
use crate::geometry::CameraIntrinsics;
use crate::map_eval::{accuracy_score, AccuracyReport, EvalConfig, EvalError, EvalImage};
use crate::map_io::ProbabilityMap;
use crate::ray_mrf::{InferenceConfig, MrfError, MrfMap, PassReport};
use crate::sensor_model::SensorNoiseModel;
use crate::sparse_grid::GridConfig;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no keyframes to build from")]
    NoKeyframes,
    #[error("leave-one-out needs at least two keyframes, got {0}")]
    TooFewForLeaveOneOut(usize),
    #[error("{0} evaluation images for {1} keyframes")]
    EvalCountMismatch(usize, usize),
    #[error(transparent)]
    Mrf(#[from] MrfError),
    #[error(transparent)]
    LogOdds(#[from] LogOddsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mrf,
    #[serde(rename = "logodds")]
    LogOdds,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mrf => "mrf",
            Method::LogOdds => "logodds",
        }
    }
}

/// A map construction method with its parameters.
#[derive(Debug, Clone)]
pub enum MapBuilder {
    Mrf { model: SensorNoiseModel, config: InferenceConfig },
    LogOdds { config: LogOddsConfig },
}

impl MapBuilder {
    pub fn method(&self) -> Method {
        match self {
            MapBuilder::Mrf { .. } => Method::Mrf,
            MapBuilder::LogOdds { .. } => Method::LogOdds,
        }
    }

    pub fn build<'a>(
        &self,
        grid: GridConfig,
        intr: &CameraIntrinsics,
        keyframes: impl IntoIterator<Item = &'a Keyframe>,
    ) -> Result<(ProbabilityMap, BuildLog), PipelineError> {
        match self {
            MapBuilder::Mrf { model, config } => build_mrf(grid, intr, model, config, keyframes),
            MapBuilder::LogOdds { config } => build_logodds(grid, intr, config, keyframes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeLog {
    pub id: u32,
    pub timestamp: f64,
    pub valid_points: usize,
    pub out_of_bounds_points: usize,
    pub new_bricks: usize,
    /// Allocation or scan integration time.
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildLog {
    pub method: Method,
    pub grid: GridConfig,
    pub keyframes: Vec<KeyframeLog>,
    /// Inference passes with per-keyframe timings; empty for log-odds.
    pub passes: Vec<PassReport>,
    pub degenerate_messages: u64,
    pub skipped_rays: u64,
    pub allocated_bricks: usize,
    pub storage_bytes: usize,
    pub seconds: f64,
}

pub fn build_mrf<'a>(
    grid: GridConfig,
    intr: &CameraIntrinsics,
    model: &SensorNoiseModel,
    config: &InferenceConfig,
    keyframes: impl IntoIterator<Item = &'a Keyframe>,
) -> Result<(ProbabilityMap, BuildLog), PipelineError> {
    let start = Instant::now();
    let mut map = MrfMap::new(grid, *intr, model.clone(), config.clone())?;
    let mut logs = Vec::new();
    for kf in keyframes {
        let t = Instant::now();
        let stats = map.add_keyframe(kf.clone())?;
        logs.push(KeyframeLog {
            id: kf.id,
            timestamp: kf.timestamp,
            valid_points: stats.valid_points,
            out_of_bounds_points: stats.out_of_bounds_points,
            new_bricks: stats.new_bricks,
            seconds: t.elapsed().as_secs_f64(),
        });
    }
    if logs.is_empty() {
        return Err(PipelineError::NoKeyframes);
    }
    let report = map.run_inference();
    let out = ProbabilityMap::from_mrf(map.grid());
    let log = BuildLog {
        method: Method::Mrf,
        grid,
        keyframes: logs,
        degenerate_messages: report.degenerate_messages(),
        skipped_rays: report.skipped_rays(),
        passes: report.passes,
        allocated_bricks: map.grid().allocated_bricks(),
        storage_bytes: map.grid().storage_bytes(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((out, log))
}

pub fn build_logodds<'a>(
    grid: GridConfig,
    intr: &CameraIntrinsics,
    config: &LogOddsConfig,
    keyframes: impl IntoIterator<Item = &'a Keyframe>,
) -> Result<(ProbabilityMap, BuildLog), PipelineError> {
    let start = Instant::now();
    let mut map = LogOddsMap::new(grid, *config)?;
    let mut logs = Vec::new();
    for kf in keyframes {
        let t = Instant::now();
        let before = map.topology().brick_count();
        map.integrate_scan(intr, &kf.pose, &kf.depth)?;
        logs.push(KeyframeLog {
            id: kf.id,
            timestamp: kf.timestamp,
            valid_points: kf.depth.valid_count(),
            out_of_bounds_points: 0,
            new_bricks: map.topology().brick_count() - before,
            seconds: t.elapsed().as_secs_f64(),
        });
    }
    if logs.is_empty() {
        return Err(PipelineError::NoKeyframes);
    }
    let out = ProbabilityMap::from_logodds(&map);
    let log = BuildLog {
        method: Method::LogOdds,
        grid,
        keyframes: logs,
        passes: Vec::new(),
        degenerate_messages: 0,
        skipped_rays: 0,
        allocated_bricks: map.topology().brick_count(),
        storage_bytes: map.allocated_voxels() * std::mem::size_of::<f64>() + map.topology().table_bytes(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((out, log))
}

/// Builds without keyframe `k` for every `k` and scores view `k` against
/// `eval_depth[k]` on the resulting map.
pub fn leave_one_out(
    builder: &MapBuilder,
    grid: GridConfig,
    intr: &CameraIntrinsics,
    keyframes: &[Keyframe],
    eval_depth: &[&DepthImage],
    eval: &EvalConfig,
) -> Result<AccuracyReport, PipelineError> {
    leave_one_out_with(builder, grid, intr, keyframes, eval_depth, eval, |_, _| {})
}

/// [`leave_one_out`], handing each held-out index and its map to `visit`.
pub fn leave_one_out_with(
    builder: &MapBuilder,
    grid: GridConfig,
    intr: &CameraIntrinsics,
    keyframes: &[Keyframe],
    eval_depth: &[&DepthImage],
    eval: &EvalConfig,
    mut visit: impl FnMut(usize, &ProbabilityMap),
) -> Result<AccuracyReport, PipelineError> {
    if keyframes.len() < 2 {
        return Err(PipelineError::TooFewForLeaveOneOut(keyframes.len()));
    }
    if eval_depth.len() != keyframes.len() {
        return Err(PipelineError::EvalCountMismatch(eval_depth.len(), keyframes.len()));
    }
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for (k, held) in keyframes.iter().enumerate() {
        let (map, _) = builder.build(grid, intr, keyframes.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, kf)| kf))?;
        visit(k, &map);
        let img = EvalImage { id: held.id.to_string(), pose: held.pose, depth: eval_depth[k] };
        match accuracy_score(&map, intr, std::slice::from_ref(&img), eval) {
            Ok(r) => images.extend(r.images),
            Err(EvalError::NothingScored) => skipped.push(img.id),
            Err(e) => return Err(e.into()),
        }
    }
    if images.is_empty() {
        return Err(EvalError::NothingScored.into());
    }
    let (mean, std) = crate::map_eval::mean_std(&images.iter().map(|s| s.score).collect::<Vec<_>>());
    Ok(AccuracyReport { images, skipped, mean, std })
}
