//! Visibility-aware accuracy metric for probabilistic occupancy maps.
//!
//! Each voxel is treated as a region of constant occlusion density
//! `α = -ln(1 - p) / Δ`. Along a ray the visibility is `vis(s) = exp(-∫α)`
//! and the generating-surface density is `ω(s) = α(s) vis(s)`. A depth
//! measurement is explained by the map when it falls close to the maximiser
//! of `ω`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::DepthImage;
use crate::geometry::{pixel_to_ray, CameraIntrinsics, CellWalk, GridGeometry, Pose, Ray, VoxelIndex};
use crate::sensor_model::SensorNoiseModel;
use crate::sparse_grid::OccupancyField;

/// Probabilities are clamped to this before converting to a density.
pub const MAX_OCCUPANCY: f64 = 1.0 - 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ray does not intersect the map")]
    EmptyTraversal,
    #[error("image {0} has no valid pixels")]
    NoValidPixels(String),
    #[error("no image could be scored")]
    NothingScored,
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("image {id} is {got:?}, intrinsics say {expected:?}")]
    ImageMismatch { id: String, got: (u32, u32), expected: (u32, u32) },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Encode(String),
}

/// `-ln(1 - p) / Δ`, so crossing a full voxel side leaves `1 - p` visibility.
#[inline]
pub fn occlusion_density(p_occ: f64, voxel_side: f64) -> f64 {
    let p = p_occ.clamp(0.0, MAX_OCCUPANCY);
    -(-p).ln_1p() / voxel_side
}

/// A ray interval of constant occlusion density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub s_entry: f64,
    pub s_exit: f64,
    pub alpha: f64,
}

impl Span {
    #[inline]
    pub fn length(&self) -> f64 {
        self.s_exit - self.s_entry
    }
}

/// Visibility along one ray.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VisProfile {
    pub spans: Vec<Span>,
    /// Visibility at each span entry; one extra trailing entry holds `vis_∞`.
    pub vis: Vec<f64>,
    /// Occlusion probability of each span, `vis_i - vis_{i+1}`.
    pub omega: Vec<f64>,
    /// Span holding the maximum of `ω`, if any span is occluding.
    pub peak: Option<usize>,
    /// `ω` at the peak (1/m).
    pub omega_peak: f64,
    /// Entry of the peak span (m).
    pub s_star: Option<f64>,
    pub vis_inf: f64,
    /// Distance at which the ray leaves the map (m).
    pub s_inf: f64,
}

impl VisProfile {
    /// Builds the profile from contiguous spans ending at the map boundary.
    pub fn from_spans(spans: Vec<Span>) -> Result<Self, EvalError> {
        if spans.is_empty() {
            return Err(EvalError::EmptyTraversal);
        }
        let mut p = Self { spans, ..Default::default() };
        p.recompute();
        Ok(p)
    }

    /// Refreshes every derived field from `spans`.
    pub fn recompute(&mut self) {
        let n = self.spans.len();
        self.vis.clear();
        self.omega.clear();
        self.peak = None;
        self.omega_peak = 0.0;
        let mut tau = 0.0;
        let mut vis = 1.0;
        self.vis.push(vis);
        for (i, s) in self.spans.iter().enumerate() {
            let w = s.alpha * vis;
            if w > self.omega_peak {
                self.omega_peak = w;
                self.peak = Some(i);
            }
            tau += s.alpha * s.length();
            let next = (-tau).exp();
            self.omega.push(vis - next);
            vis = next;
            self.vis.push(vis);
        }
        self.vis_inf = vis;
        self.s_inf = if n > 0 { self.spans[n - 1].s_exit } else { 0.0 };
        self.s_star = self.peak.map(|i| self.spans[i].s_entry);
    }

    /// Visibility at distance `s`.
    pub fn vis_at(&self, s: f64) -> f64 {
        let i = self.spans.partition_point(|sp| sp.s_exit <= s);
        if i >= self.spans.len() {
            return self.vis_inf;
        }
        let sp = &self.spans[i];
        let into = (s - sp.s_entry).max(0.0);
        self.vis[i] * (-sp.alpha * into).exp()
    }
}

/// Which region a measurement must fall in to count as explained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BandMode {
    /// `|measured - s*| <= k σ(measured)`.
    SigmaBand { k: f64 },
    /// Measured depth inside the peak voxel's span.
    VoxelBounds,
}

impl Default for BandMode {
    fn default() -> Self {
        BandMode::SigmaBand { k: 1.5 }
    }
}

/// σ used for the sigma band.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalSigma {
    Constant(f64),
    Model(SensorNoiseModel),
}

impl EvalSigma {
    #[inline]
    pub fn sigma(&self, u: u32, v: u32, d: f64) -> f64 {
        match self {
            EvalSigma::Constant(s) => *s,
            EvalSigma::Model(m) => m.sigma(u, v, d),
        }
    }
}

/// Occlusion assigned to voxels the map has no information about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownSpace {
    /// Unknown space does not occlude.
    #[default]
    Transparent,
    /// Unknown space occludes with the map's unobserved probability.
    Prior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub band: BandMode,
    pub vis_boundary_threshold: f64,
    pub sigma: EvalSigma,
    pub unknown: UnknownSpace,
}

impl EvalConfig {
    pub fn new(sigma: EvalSigma) -> Self {
        Self { band: BandMode::default(), vis_boundary_threshold: 0.5, sigma, unknown: UnknownSpace::default() }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if let BandMode::SigmaBand { k } = self.band {
            if !(k > 0.0) {
                return Err(EvalError::InvalidConfig(format!("band multiplier {k}")));
            }
        }
        if !(self.vis_boundary_threshold > 0.0 && self.vis_boundary_threshold < 1.0) {
            return Err(EvalError::InvalidConfig(format!("visibility threshold {}", self.vis_boundary_threshold)));
        }
        if let EvalSigma::Constant(s) = self.sigma {
            if !(s > 0.0) {
                return Err(EvalError::InvalidConfig(format!("constant sigma {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RayClass {
    Accurate,
    Inaccurate,
    /// The map barely occludes and the measurement lies past its boundary.
    BeyondMap,
}

impl RayClass {
    pub fn is_accurate(self) -> bool {
        !matches!(self, RayClass::Inaccurate)
    }
}

/// Classifies one measurement against a profile; `sigma` is σ(measured).
pub fn classify_ray(profile: &VisProfile, measured: f64, sigma: f64, config: &EvalConfig) -> RayClass {
    let accurate = |ok: bool| if ok { RayClass::Accurate } else { RayClass::Inaccurate };
    if profile.vis_inf > config.vis_boundary_threshold {
        return if measured > profile.s_inf { RayClass::BeyondMap } else { RayClass::Inaccurate };
    }
    let Some(peak) = profile.peak else { return RayClass::Inaccurate };
    match config.band {
        BandMode::SigmaBand { k } => accurate((measured - profile.spans[peak].s_entry).abs() <= k * sigma),
        BandMode::VoxelBounds => {
            let sp = &profile.spans[peak];
            accurate(measured >= sp.s_entry && measured <= sp.s_exit)
        }
    }
}

/// Fills `out` with the spans of every voxel from the camera (or the grid
/// entry) to the grid exit.
pub fn ray_spans(
    field: &dyn OccupancyField,
    geometry: &GridGeometry,
    ray: &Ray,
    unknown: UnknownSpace,
    out: &mut Vec<Span>,
) -> Result<(), EvalError> {
    out.clear();
    let (t0, t1) = geometry.clip_ray(&ray.origin, &ray.direction).ok_or(EvalError::EmptyTraversal)?;
    let t0 = t0.max(0.0);
    if !(t1 > t0) {
        return Err(EvalError::EmptyTraversal);
    }
    let side = geometry.voxel_side;
    let unknown_alpha = match unknown {
        UnknownSpace::Transparent => 0.0,
        UnknownSpace::Prior => occlusion_density(field.unknown_probability(), side),
    };
    let hi = [geometry.dims[0] as i64, geometry.dims[1] as i64, geometry.dims[2] as i64];
    for (c, s_entry, s_exit) in
        CellWalk::new(&ray.origin, &ray.direction, &geometry.origin, side, 1, [0; 3], hi, t0, t1)
    {
        let voxel = VoxelIndex([c[0] as u32, c[1] as u32, c[2] as u32]);
        let alpha = field.occupancy(voxel).map_or(unknown_alpha, |p| occlusion_density(p, side));
        out.push(Span { s_entry, s_exit, alpha });
    }
    if out.is_empty() {
        return Err(EvalError::EmptyTraversal);
    }
    Ok(())
}

/// Profile of one ray through a map.
pub fn ray_profile(field: &dyn OccupancyField, ray: &Ray, unknown: UnknownSpace) -> Result<VisProfile, EvalError> {
    let mut spans = Vec::new();
    ray_spans(field, &field.geometry(), ray, unknown, &mut spans)?;
    VisProfile::from_spans(spans)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelClass {
    Invalid,
    Accurate,
    Inaccurate,
    BeyondMap,
}

impl From<RayClass> for PixelClass {
    fn from(c: RayClass) -> Self {
        match c {
            RayClass::Accurate => PixelClass::Accurate,
            RayClass::Inaccurate => PixelClass::Inaccurate,
            RayClass::BeyondMap => PixelClass::BeyondMap,
        }
    }
}

/// Per-pixel classification and the profile peak for every valid pixel.
#[derive(Debug, Clone)]
pub struct ImageEvaluation {
    pub width: u32,
    pub height: u32,
    pub classes: Vec<PixelClass>,
    /// Peak location `s*` per pixel (NaN if invalid or no peak).
    pub s_star: Vec<f64>,
    pub valid: usize,
    pub accurate: usize,
}

impl ImageEvaluation {
    pub fn score(&self) -> Option<f64> {
        (self.valid > 0).then(|| self.accurate as f64 / self.valid as f64)
    }
}

/// Classifies every valid pixel of one image.
pub fn evaluate_image(
    field: &dyn OccupancyField,
    intr: &CameraIntrinsics,
    pose: &Pose,
    depth: &DepthImage,
    config: &EvalConfig,
) -> ImageEvaluation {
    let geometry = field.geometry();
    let w = depth.width() as usize;
    let rows: Vec<(Vec<PixelClass>, Vec<f64>)> = (0..depth.height())
        .into_par_iter()
        .map_init(VisProfile::default, |profile, v| {
            let mut classes = vec![PixelClass::Invalid; w];
            let mut stars = vec![f64::NAN; w];
            for u in 0..depth.width() {
                let raw = depth.raw(u, v);
                if raw == 0 {
                    continue;
                }
                let Ok(ray) = pixel_to_ray(intr, pose, u, v, raw as f64) else { continue };
                let z = ray.measured_depth;
                let class = match ray_spans(field, &geometry, &ray, config.unknown, &mut profile.spans) {
                    Ok(()) => {
                        profile.recompute();
                        stars[u as usize] = profile.s_star.unwrap_or(f64::NAN);
                        classify_ray(profile, z, config.sigma.sigma(u, v, z), config)
                    }
                    // The ray never enters the map: nothing occludes it.
                    Err(_) => RayClass::BeyondMap,
                };
                classes[u as usize] = class.into();
            }
            (classes, stars)
        })
        .collect();
    let mut classes = Vec::with_capacity(w * depth.height() as usize);
    let mut s_star = Vec::with_capacity(classes.capacity());
    for (c, s) in rows {
        classes.extend(c);
        s_star.extend(s);
    }
    let valid = classes.iter().filter(|c| **c != PixelClass::Invalid).count();
    let accurate = classes.iter().filter(|c| matches!(c, PixelClass::Accurate | PixelClass::BeyondMap)).count();
    ImageEvaluation { width: depth.width(), height: depth.height(), classes, s_star, valid, accurate }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub valid: usize,
    pub accurate: usize,
    pub score: f64,
}

/// An image to score: identifier, pose and depth.
pub struct EvalImage<'a> {
    pub id: String,
    pub pose: Pose,
    pub depth: &'a DepthImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub images: Vec<ImageScore>,
    /// Images without a valid pixel.
    pub skipped: Vec<String>,
    pub mean: f64,
    /// Population standard deviation across images.
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Scores every image and aggregates.
pub fn accuracy_score(
    field: &dyn OccupancyField,
    intr: &CameraIntrinsics,
    images: &[EvalImage<'_>],
    config: &EvalConfig,
) -> Result<AccuracyReport, EvalError> {
    config.validate()?;
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    for img in images {
        let got = (img.depth.width(), img.depth.height());
        if got != (intr.width, intr.height) {
            return Err(EvalError::ImageMismatch { id: img.id.clone(), got, expected: (intr.width, intr.height) });
        }
        let e = evaluate_image(field, intr, &img.pose, img.depth, config);
        match e.score() {
            Some(score) => scores.push(ImageScore { image_id: img.id.clone(), valid: e.valid, accurate: e.accurate, score }),
            None => {
                log::warn!("{}", EvalError::NoValidPixels(img.id.clone()));
                skipped.push(img.id.clone());
            }
        }
    }
    if scores.is_empty() {
        return Err(EvalError::NothingScored);
    }
    let (mean, std) = mean_std(&scores.iter().map(|s| s.score).collect::<Vec<_>>());
    Ok(AccuracyReport { images: scores, skipped, mean, std })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// JSON summary of one or more evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub mean: f64,
    pub std: f64,
    pub images: usize,
    pub skipped: Vec<String>,
    /// Keyed by voxel side in meters, formatted as a decimal string.
    pub per_resolution: BTreeMap<String, MeanStd>,
}

pub fn resolution_key(voxel_side: f64) -> String {
    format!("{voxel_side}")
}

impl AccuracySummary {
    pub fn from_report(report: &AccuracyReport, voxel_side: f64) -> Self {
        let mut per_resolution = BTreeMap::new();
        per_resolution.insert(resolution_key(voxel_side), MeanStd { mean: report.mean, std: report.std });
        Self {
            mean: report.mean,
            std: report.std,
            images: report.images.len(),
            skipped: report.skipped.clone(),
            per_resolution,
        }
    }
}

pub fn write_scores_csv(path: &Path, scores: &[ImageScore]) -> Result<(), EvalError> {
    let io = |source: std::io::Error| EvalError::Io { path: path.display().to_string(), source };
    let mut w = csv::Writer::from_path(path).map_err(|e| EvalError::Encode(e.to_string()))?;
    for s in scores {
        w.serialize(s).map_err(|e| EvalError::Encode(e.to_string()))?;
    }
    w.flush().map_err(io)
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ImageScore>, EvalError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| EvalError::Encode(e.to_string()))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| EvalError::Encode(e.to_string()))
}

pub fn write_summary_json(path: &Path, summary: &AccuracySummary) -> Result<(), EvalError> {
    let io = |source: std::io::Error| EvalError::Io { path: path.display().to_string(), source };
    let mut f = std::fs::File::create(path).map_err(io)?;
    serde_json::to_writer_pretty(&mut f, summary).map_err(|e| EvalError::Encode(e.to_string()))?;
    f.write_all(b"\n").map_err(io)
}

pub const COLOR_ACCURATE: [u8; 3] = [253, 231, 37];
pub const COLOR_INACCURATE: [u8; 3] = [53, 183, 121];
pub const COLOR_INVALID: [u8; 3] = [68, 1, 84];

/// Writes the classification as an RGB PNG: accurate yellow, inaccurate
/// green, invalid purple.
pub fn write_classification_png(path: &Path, eval: &ImageEvaluation) -> Result<(), EvalError> {
    let img = image::RgbImage::from_fn(eval.width, eval.height, |u, v| {
        let c = match eval.classes[(v * eval.width + u) as usize] {
            PixelClass::Accurate | PixelClass::BeyondMap => COLOR_ACCURATE,
            PixelClass::Inaccurate => COLOR_INACCURATE,
            PixelClass::Invalid => COLOR_INVALID,
        };
        image::Rgb(c)
    });
    img.save(path).map_err(|e| EvalError::Encode(format!("{}: {e}", path.display())))
}
