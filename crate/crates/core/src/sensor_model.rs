//! Distance-dependent forward sensor model.
//!
//! For a hypothesised surface at range `d` the sensor is expected to report
//! `predicted(d) = a0 + a1 d + a2 d²` with standard deviation
//! `sigma(d) = b0 + b1 d + b2 d²`. Coefficients are stored per square pixel
//! patch, with an aggregate polynomial used wherever a patch was not fitted.
//! All distances are ranges along the ray, not z-depth.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::DepthImage;
use crate::geometry::CameraIntrinsics;

/// Lower bound applied to every evaluated standard deviation (meters).
pub const SIGMA_MIN: f64 = 1e-4;
/// Minimum samples a patch needs before it is fitted.
pub const MIN_PATCH_SAMPLES: usize = 30;
/// Minimum ground-truth depth span a patch needs before it is fitted (meters).
pub const MIN_DEPTH_SPAN: f64 = 0.5;
pub const DEFAULT_PATCH_SIZE: u32 = 20;

#[derive(Debug, Error)]
pub enum SensorModelError {
    #[error("insufficient calibration data: {0}")]
    InsufficientData(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("invalid noise model: {0}")]
    Invalid(String),
    #[error("noise model I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("noise model JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePolynomial {
    /// Predicted measurement coefficients `[a0, a1, a2]`.
    pub bias: [f64; 3],
    /// Standard deviation coefficients `[b0, b1, b2]`.
    pub sigma: [f64; 3],
}

impl NoisePolynomial {
    /// Unbiased sensor with constant noise.
    pub fn constant(sigma: f64) -> Self {
        Self { bias: [0.0, 1.0, 0.0], sigma: [sigma, 0.0, 0.0] }
    }

    #[inline]
    fn eval(c: &[f64; 3], d: f64) -> f64 {
        c[0] + d * (c[1] + d * c[2])
    }

    #[inline]
    fn slope(c: &[f64; 3], d: f64) -> f64 {
        c[1] + 2.0 * c[2] * d
    }

    pub fn is_finite(&self) -> bool {
        self.bias.iter().chain(self.sigma.iter()).all(|c| c.is_finite())
    }
}

/// Gaussian density `N(x; mean, sigma)`.
#[inline]
pub fn gaussian_pdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorNoiseModel {
    patch_size: u32,
    width: u32,
    height: u32,
    d_min: f64,
    d_max: f64,
    aggregate: NoisePolynomial,
    /// Row-major `rows x cols` patch grid; `None` falls back to the aggregate.
    patches: Vec<Option<NoisePolynomial>>,
}

impl SensorNoiseModel {
    pub fn new(
        patch_size: u32,
        width: u32,
        height: u32,
        d_min: f64,
        d_max: f64,
        aggregate: NoisePolynomial,
    ) -> Result<Self, SensorModelError> {
        if patch_size == 0 || width == 0 || height == 0 {
            return Err(SensorModelError::Invalid("patch size and image size must be positive".into()));
        }
        if !(d_min > 0.0 && d_max > d_min) {
            return Err(SensorModelError::Invalid(format!("bad operating range [{d_min}, {d_max}]")));
        }
        if !aggregate.is_finite() {
            return Err(SensorModelError::Invalid("aggregate coefficients are not finite".into()));
        }
        let cols = width.div_ceil(patch_size) as usize;
        let rows = height.div_ceil(patch_size) as usize;
        Ok(Self { patch_size, width, height, d_min, d_max, aggregate, patches: vec![None; cols * rows] })
    }

    /// Unbiased, constant-σ model for the whole image.
    pub fn constant(sigma: f64, width: u32, height: u32, d_min: f64, d_max: f64) -> Result<Self, SensorModelError> {
        Self::new(DEFAULT_PATCH_SIZE, width, height, d_min, d_max, NoisePolynomial::constant(sigma))
    }

    pub fn patch_size(&self) -> u32 {
        self.patch_size
    }

    pub fn image_size(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn range(&self) -> (f64, f64) {
        (self.d_min, self.d_max)
    }

    pub fn patch_cols(&self) -> u32 {
        self.width.div_ceil(self.patch_size)
    }

    pub fn patch_rows(&self) -> u32 {
        self.height.div_ceil(self.patch_size)
    }

    pub fn aggregate(&self) -> &NoisePolynomial {
        &self.aggregate
    }

    pub fn patch(&self, i: u32, j: u32) -> Option<&NoisePolynomial> {
        if i >= self.patch_cols() || j >= self.patch_rows() {
            return None;
        }
        self.patches[(j * self.patch_cols() + i) as usize].as_ref()
    }

    pub fn set_patch(&mut self, i: u32, j: u32, poly: NoisePolynomial) -> Result<(), SensorModelError> {
        if i >= self.patch_cols() || j >= self.patch_rows() {
            return Err(SensorModelError::Invalid(format!("patch ({i}, {j}) out of range")));
        }
        if !poly.is_finite() {
            return Err(SensorModelError::Invalid(format!("patch ({i}, {j}) has non-finite coefficients")));
        }
        let cols = self.patch_cols();
        self.patches[(j * cols + i) as usize] = Some(poly);
        Ok(())
    }

    pub fn fitted_patch_count(&self) -> usize {
        self.patches.iter().filter(|p| p.is_some()).count()
    }

    /// Polynomial governing pixel `(u, v)`.
    #[inline]
    pub fn polynomial(&self, u: u32, v: u32) -> &NoisePolynomial {
        let i = (u / self.patch_size).min(self.patch_cols() - 1);
        let j = (v / self.patch_size).min(self.patch_rows() - 1);
        self.patches[(j * self.patch_cols() + i) as usize].as_ref().unwrap_or(&self.aggregate)
    }

    #[inline]
    fn clamp_range(&self, d: f64) -> f64 {
        d.clamp(self.d_min, self.d_max)
    }

    /// Mean measurement expected from a surface at range `d`.
    ///
    /// Outside the operating range the polynomial is continued with unit
    /// slope from the nearest range edge.
    #[inline]
    pub fn predicted(&self, u: u32, v: u32, d: f64) -> f64 {
        let poly = self.polynomial(u, v);
        let c = self.clamp_range(d);
        NoisePolynomial::eval(&poly.bias, c) + (d - c)
    }

    #[inline]
    pub fn sigma(&self, u: u32, v: u32, d: f64) -> f64 {
        let poly = self.polynomial(u, v);
        NoisePolynomial::eval(&poly.sigma, self.clamp_range(d)).max(SIGMA_MIN)
    }

    /// Forward sensor density of measuring `z_meas` given a surface at range `d`.
    #[inline]
    pub fn nu(&self, u: u32, v: u32, d: f64, z_meas: f64) -> f64 {
        let poly = self.polynomial(u, v);
        let c = self.clamp_range(d);
        let mean = NoisePolynomial::eval(&poly.bias, c) + (d - c);
        let sigma = NoisePolynomial::eval(&poly.sigma, c).max(SIGMA_MIN);
        gaussian_pdf(z_meas, mean, sigma)
    }

    /// Unclamped σ, floored at zero. Used for simulation only.
    #[inline]
    pub fn sigma_unclamped(&self, u: u32, v: u32, d: f64) -> f64 {
        let poly = self.polynomial(u, v);
        NoisePolynomial::eval(&poly.sigma, self.clamp_range(d)).max(0.0)
    }

    /// Largest σ at range `d` over every fitted patch and the aggregate.
    pub fn sigma_max(&self, d: f64) -> f64 {
        let c = self.clamp_range(d);
        self.patches
            .iter()
            .flatten()
            .chain(std::iter::once(&self.aggregate))
            .map(|p| NoisePolynomial::eval(&p.sigma, c))
            .fold(SIGMA_MIN, f64::max)
    }

    /// Range whose predicted measurement is `z`, searched around `z`.
    pub fn invert_predicted(&self, u: u32, v: u32, z: f64) -> f64 {
        let poly = self.polynomial(u, v);
        let mut d = z;
        for _ in 0..20 {
            let c = self.clamp_range(d);
            let f = NoisePolynomial::eval(&poly.bias, c) + (d - c) - z;
            let slope = if c == d { NoisePolynomial::slope(&poly.bias, d) } else { 1.0 };
            if !(slope.abs() > 1e-6) {
                return z;
            }
            let next = d - f / slope;
            if (next - d).abs() < 1e-12 {
                return next;
            }
            d = next;
        }
        if d.is_finite() && d > 0.0 {
            d
        } else {
            z
        }
    }

    pub fn to_file(&self) -> NoiseModelFile {
        let cols = self.patch_cols();
        let patches = self
            .patches
            .iter()
            .enumerate()
            .filter_map(|(k, p)| {
                p.map(|poly| PatchEntry {
                    i: k as u32 % cols,
                    j: k as u32 / cols,
                    bias: poly.bias,
                    sigma: poly.sigma,
                })
            })
            .collect();
        NoiseModelFile {
            patch_size: self.patch_size,
            width: self.width,
            height: self.height,
            d_min: self.d_min,
            d_max: self.d_max,
            aggregate: self.aggregate,
            patches,
        }
    }

    pub fn from_file(file: &NoiseModelFile) -> Result<Self, SensorModelError> {
        let mut model =
            Self::new(file.patch_size, file.width, file.height, file.d_min, file.d_max, file.aggregate)?;
        for p in &file.patches {
            model.set_patch(p.i, p.j, NoisePolynomial { bias: p.bias, sigma: p.sigma })?;
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String, SensorModelError> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(s: &str) -> Result<Self, SensorModelError> {
        Self::from_file(&serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), SensorModelError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SensorModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk JSON layout of a [`SensorNoiseModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModelFile {
    pub patch_size: u32,
    pub width: u32,
    pub height: u32,
    pub d_min: f64,
    pub d_max: f64,
    pub aggregate: NoisePolynomial,
    pub patches: Vec<PatchEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub i: u32,
    pub j: u32,
    pub bias: [f64; 3],
    pub sigma: [f64; 3],
}

/// One associated measurement: pixel, measured and ground-truth range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub u: u32,
    pub v: u32,
    pub z_meas: f64,
    pub z_gt: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchFit {
    pub i: u32,
    pub j: u32,
    pub samples: usize,
    pub fitted: bool,
    pub r2_bias: Option<f64>,
    pub r2_sigma: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub aggregate_samples: usize,
    /// `"central_third"` or `"all_pixels"` when the central region was too sparse.
    pub aggregate_source: String,
    pub aggregate_r2_bias: f64,
    pub aggregate_r2_sigma: f64,
    pub patches: Vec<PatchFit>,
}

#[derive(Debug, Clone, Copy)]
pub struct PolynomialFit {
    pub poly: NoisePolynomial,
    pub r2_bias: f64,
    pub r2_sigma: f64,
}

fn least_squares_quadratic(x: &[f64], y: &[f64]) -> Result<([f64; 3], f64), SensorModelError> {
    let n = x.len();
    let design = DMatrix::from_fn(n, 3, |r, c| x[r].powi(c as i32));
    let rhs = DVector::from_column_slice(y);
    let coef = design
        .clone()
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| SensorModelError::DegenerateFit(e.to_string()))?;
    let fitted = &design * &coef;
    let mean = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(fitted.iter()).map(|(v, f)| (v - f).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(([coef[0], coef[1], coef[2]], r2))
}

/// Fits bias and σ polynomials to `(z_gt, z_meas)` pairs.
///
/// The bias is a least-squares quadratic of measured against true depth. σ is
/// a quadratic fit of `|residual| * sqrt(pi/2)`, whose expectation equals σ
/// for Gaussian residuals.
pub fn fit_polynomial(samples: &[(f64, f64)]) -> Result<PolynomialFit, SensorModelError> {
    if samples.len() < MIN_PATCH_SAMPLES {
        return Err(SensorModelError::InsufficientData(format!(
            "{} samples, need {MIN_PATCH_SAMPLES}",
            samples.len()
        )));
    }
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.0), hi.max(s.0)));
    if hi - lo < MIN_DEPTH_SPAN {
        return Err(SensorModelError::DegenerateFit(format!(
            "depth span {:.3} m below {MIN_DEPTH_SPAN} m",
            hi - lo
        )));
    }
    let gt: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let meas: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let (bias, r2_bias) = least_squares_quadratic(&gt, &meas)?;
    let scale = (PI / 2.0).sqrt();
    let abs_res: Vec<f64> = samples
        .iter()
        .map(|&(g, m)| (m - NoisePolynomial::eval(&bias, g)).abs() * scale)
        .collect();
    let (sigma, r2_sigma) = least_squares_quadratic(&gt, &abs_res)?;
    let poly = NoisePolynomial { bias, sigma };
    if !poly.is_finite() {
        return Err(SensorModelError::DegenerateFit("non-finite coefficients".into()));
    }
    Ok(PolynomialFit { poly, r2_bias, r2_sigma })
}

/// Per-patch calibration with an aggregate fitted over the central third of
/// the image (or every pixel if that region is too sparse).
pub fn fit_calibration(
    samples: &[CalibrationSample],
    width: u32,
    height: u32,
    patch_size: u32,
) -> Result<(SensorNoiseModel, FitDiagnostics), SensorModelError> {
    if patch_size == 0 || width == 0 || height == 0 {
        return Err(SensorModelError::Invalid("patch size and image size must be positive".into()));
    }
    let valid: Vec<&CalibrationSample> = samples
        .iter()
        .filter(|s| {
            s.u < width && s.v < height && s.z_meas.is_finite() && s.z_gt.is_finite() && s.z_meas > 0.0 && s.z_gt > 0.0
        })
        .collect();
    if valid.is_empty() {
        return Err(SensorModelError::InsufficientData("no valid samples".into()));
    }

    let central = |s: &&CalibrationSample| {
        3 * s.u >= width && 3 * s.u < 2 * width && 3 * s.v >= height && 3 * s.v < 2 * height
    };
    let pairs = |it: &mut dyn Iterator<Item = &&CalibrationSample>| -> Vec<(f64, f64)> {
        it.map(|s| (s.z_gt, s.z_meas)).collect()
    };
    let central_pairs = pairs(&mut valid.iter().filter(|s| central(s)));
    let (agg, agg_source, agg_n) = match fit_polynomial(&central_pairs) {
        Ok(fit) => (fit, "central_third", central_pairs.len()),
        Err(_) => {
            let all = pairs(&mut valid.iter());
            let n = all.len();
            (fit_polynomial(&all)?, "all_pixels", n)
        }
    };

    let (d_min, d_max) = valid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.z_gt), hi.max(s.z_gt)));
    let d_max = if d_max > d_min { d_max } else { d_min + MIN_DEPTH_SPAN };
    let mut model = SensorNoiseModel::new(patch_size, width, height, d_min, d_max, agg.poly)?;

    let cols = model.patch_cols();
    let rows = model.patch_rows();
    let mut buckets: Vec<Vec<(f64, f64)>> = vec![Vec::new(); (cols * rows) as usize];
    for s in &valid {
        buckets[((s.v / patch_size) * cols + s.u / patch_size) as usize].push((s.z_gt, s.z_meas));
    }
    let mut fits = Vec::new();
    for (k, bucket) in buckets.iter().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        let (i, j) = (k as u32 % cols, k as u32 / cols);
        let mut entry = PatchFit { i, j, samples: bucket.len(), fitted: false, r2_bias: None, r2_sigma: None, note: None };
        match fit_polynomial(bucket) {
            Ok(fit) => {
                model.set_patch(i, j, fit.poly)?;
                entry.fitted = true;
                entry.r2_bias = Some(fit.r2_bias);
                entry.r2_sigma = Some(fit.r2_sigma);
            }
            Err(e) => entry.note = Some(e.to_string()),
        }
        fits.push(entry);
    }

    let diag = FitDiagnostics {
        aggregate_samples: agg_n,
        aggregate_source: agg_source.to_string(),
        aggregate_r2_bias: agg.r2_bias,
        aggregate_r2_sigma: agg.r2_sigma,
        patches: fits,
    };
    Ok((model, diag))
}

/// Samples a noisy depth image from a ground-truth one.
///
/// Each valid pixel's ground-truth range `d` is replaced by
/// `predicted(d) + N(0, sigma(d)^2)` and converted back to raw z-depth.
/// Pixels whose noisy value is not representable become invalid. The σ floor
/// used by [`SensorNoiseModel::nu`] is not applied here, so a zero-σ model
/// reproduces its input.
pub fn simulate_noisy_depth(
    model: &SensorNoiseModel,
    intr: &CameraIntrinsics,
    ground_truth: &DepthImage,
    seed: u64,
) -> DepthImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ground_truth.clone();
    let scale = ground_truth.depth_scale();
    for v in 0..ground_truth.height() {
        for u in 0..ground_truth.width() {
            let raw = ground_truth.raw(u, v);
            if raw == 0 {
                continue;
            }
            let k = intr.bearing(u as f64, v as f64).norm();
            let range = raw as f64 / scale * k;
            let eps: f64 = StandardNormal.sample(&mut rng);
            let noisy = model.predicted(u, v, range) + eps * model.sigma_unclamped(u, v, range);
            let raw_noisy = (noisy / k * scale).round();
            let value = if raw_noisy >= 1.0 && raw_noisy <= u16::MAX as f64 { raw_noisy as u16 } else { 0 };
            out.set_raw(u, v, value);
        }
    }
    out
}
