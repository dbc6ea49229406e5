//! Per-ray factors and loopy belief propagation over the voxel grid.
//!
//! Each ray couples the voxels it crosses through a potential that is
//! non-zero only when voxel `i` is the first occupied one, in which case it
//! equals the sensor density `ν_i`. Messages from the factor to its depth and
//! occupancy variables then have linear-time closed forms:
//!
//! ```text
//! P_i      = Π_{k<i} μ_k(0)
//! depth_i  = ν_i μ_i(1) P_i
//! A_i      = Σ_{j<i} μ_j(1) ν_j P_j
//! pos_i    = A_i + ν_i P_i
//! neg_i    = A_i + P_i S_i,   S_i = μ_{i+1}(1) ν_{i+1} + μ_{i+1}(0) S_{i+1}
//! ```
//!
//! `P_i S_i` equals `(1/μ_i(0)) Σ_{j>i} μ_j(1) ν_j P_j` without dividing by
//! `μ_i(0)`.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::Keyframe;
use crate::geometry::{pixel_to_ray, CameraIntrinsics, GeometryError};
use crate::sensor_model::SensorNoiseModel;
use crate::sparse_grid::{
    AllocationStats, GridConfig, GridError, MessagePair, SparseGrid, SparseStep, DEFAULT_MESSAGE_FLOOR,
    DEFAULT_PRIOR,
};

/// Largest ray the exhaustive oracle accepts.
pub const ORACLE_MAX_STEPS: usize = 12;

#[derive(Debug, Error)]
pub enum MrfError {
    #[error("ray has {0} steps; the oracle enumerates at most {ORACLE_MAX_STEPS}")]
    TooLarge(usize),
    #[error("{0} potentials for {1} incoming messages")]
    LengthMismatch(usize, usize),
    #[error("invalid inference config: {0}")]
    InvalidConfig(String),
    #[error("keyframe {id}: image is {got:?}, intrinsics say {expected:?}")]
    ImageMismatch { id: u32, got: (u32, u32), expected: (u32, u32) },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// How each ray's outgoing message is weighted in its keyframe's average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageWeighting {
    /// Every ray counts once.
    Uniform,
    /// Weighted by in-voxel path length over the voxel side.
    #[default]
    Length,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub prior: f64,
    pub passes: u32,
    /// Rays are traversed to `measured + sigma_cutoff * σ(measured)`.
    pub sigma_cutoff: f64,
    pub message_floor: f64,
    pub weighting: MessageWeighting,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            prior: DEFAULT_PRIOR,
            passes: 3,
            sigma_cutoff: 3.0,
            message_floor: DEFAULT_MESSAGE_FLOOR,
            weighting: MessageWeighting::Length,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), MrfError> {
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(MrfError::InvalidConfig(format!("prior {} outside (0, 1)", self.prior)));
        }
        if self.passes == 0 {
            return Err(MrfError::InvalidConfig("passes must be at least 1".into()));
        }
        if !(self.sigma_cutoff > 0.0) {
            return Err(MrfError::InvalidConfig(format!("sigma cutoff {}", self.sigma_cutoff)));
        }
        if !(self.message_floor > 0.0 && self.message_floor < 1e-6) {
            return Err(MrfError::InvalidConfig(format!("message floor {}", self.message_floor)));
        }
        Ok(())
    }
}

/// One ray's factor: crossed voxels and sensor densities at their midpoints.
#[derive(Debug, Clone, Default)]
pub struct RayFactor {
    pub keyframe: usize,
    pub steps: Vec<SparseStep>,
    pub nu: Vec<f64>,
}

/// Messages around one ray factor.
#[derive(Debug, Clone, Default)]
pub struct RayMessages {
    pub incoming: Vec<MessagePair>,
    pub outgoing: Vec<MessagePair>,
    pub depth: Vec<f64>,
    pub degenerate: usize,
}

fn check_lengths(nu: &[f64], incoming: &[MessagePair]) -> Result<(), MrfError> {
    if nu.len() != incoming.len() {
        return Err(MrfError::LengthMismatch(nu.len(), incoming.len()));
    }
    Ok(())
}

/// Factor-to-depth message, unnormalized.
pub fn depth_message(nu: &[f64], incoming: &[MessagePair]) -> Result<Vec<f64>, MrfError> {
    check_lengths(nu, incoming)?;
    let mut p = 1.0;
    Ok(nu
        .iter()
        .zip(incoming)
        .map(|(&v, m)| {
            let out = v * m.m1 * p;
            p *= m.m0;
            out
        })
        .collect())
}

/// Unnormalized factor-to-occupancy messages `(neg, pos)` written into `out`.
/// `suffix` is scratch space.
pub fn occupancy_messages_raw_into(
    nu: &[f64],
    incoming: &[MessagePair],
    out: &mut Vec<MessagePair>,
    suffix: &mut Vec<f64>,
) {
    let n = nu.len();
    suffix.clear();
    suffix.resize(n, 0.0);
    let mut s = 0.0;
    for i in (0..n).rev() {
        suffix[i] = s;
        s = incoming[i].m1 * nu[i] + incoming[i].m0 * s;
    }
    out.clear();
    let (mut p, mut a) = (1.0, 0.0);
    for i in 0..n {
        out.push(MessagePair { m0: a + p * suffix[i], m1: a + nu[i] * p });
        a += incoming[i].m1 * nu[i] * p;
        p *= incoming[i].m0;
    }
}

/// Normalized factor-to-occupancy messages into `out`; returns how many
/// pairs vanished and were replaced by uniform.
pub fn occupancy_messages_into(
    nu: &[f64],
    incoming: &[MessagePair],
    out: &mut Vec<MessagePair>,
    suffix: &mut Vec<f64>,
) -> usize {
    occupancy_messages_raw_into(nu, incoming, out, suffix);
    let mut degenerate = 0;
    for m in out.iter_mut() {
        *m = m.try_normalized().unwrap_or_else(|| {
            degenerate += 1;
            MessagePair::UNIFORM
        });
    }
    degenerate
}

pub fn occupancy_messages_raw(nu: &[f64], incoming: &[MessagePair]) -> Result<Vec<MessagePair>, MrfError> {
    check_lengths(nu, incoming)?;
    let mut out = Vec::with_capacity(nu.len());
    occupancy_messages_raw_into(nu, incoming, &mut out, &mut Vec::new());
    Ok(out)
}

pub fn occupancy_messages(nu: &[f64], incoming: &[MessagePair]) -> Result<(Vec<MessagePair>, usize), MrfError> {
    check_lengths(nu, incoming)?;
    let mut out = Vec::with_capacity(nu.len());
    let degenerate = occupancy_messages_into(nu, incoming, &mut out, &mut Vec::new());
    Ok((out, degenerate))
}

impl RayFactor {
    pub fn messages(&self, incoming: &[MessagePair]) -> Result<RayMessages, MrfError> {
        let depth = depth_message(&self.nu, incoming)?;
        let (outgoing, degenerate) = occupancy_messages(&self.nu, incoming)?;
        Ok(RayMessages { incoming: incoming.to_vec(), outgoing, depth, degenerate })
    }
}

/// Exact marginalization of one ray factor by enumerating occupancy states.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleMessages {
    /// Weight of each depth hypothesis, given a uniform depth message.
    pub depth: Vec<f64>,
    /// Unnormalized `(o_i = 0, o_i = 1)` weights excluding voxel `i`'s own incoming message.
    pub occupancy: Vec<MessagePair>,
}

/// Sums the potential times incoming messages over all `2^N` occupancy
/// configurations. The empty configuration has potential zero.
pub fn brute_force_oracle(nu: &[f64], incoming: &[MessagePair]) -> Result<OracleMessages, MrfError> {
    check_lengths(nu, incoming)?;
    let n = nu.len();
    if n > ORACLE_MAX_STEPS {
        return Err(MrfError::TooLarge(n));
    }
    let mut depth = vec![0.0; n];
    let mut occupancy = vec![MessagePair { m0: 0.0, m1: 0.0 }; n];
    let state = |c: u32, j: usize| c >> j & 1 == 1;
    let weight = |c: u32, j: usize| if state(c, j) { incoming[j].m1 } else { incoming[j].m0 };
    for c in 1u32..(1u32 << n) {
        let first = c.trailing_zeros() as usize;
        let psi = nu[first];
        let all: f64 = (0..n).map(|j| weight(c, j)).product();
        depth[first] += psi * all;
        for i in 0..n {
            let others: f64 = (0..n).filter(|&j| j != i).map(|j| weight(c, j)).product();
            if state(c, i) {
                occupancy[i].m1 += psi * others;
            } else {
                occupancy[i].m0 += psi * others;
            }
        }
    }
    Ok(OracleMessages { depth, occupancy })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KeyframeTiming {
    pub keyframe_id: u32,
    pub seconds: f64,
    pub rays: u64,
    pub skipped_rays: u64,
    pub degenerate_messages: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PassReport {
    pub pass: u32,
    pub seconds: f64,
    pub keyframes: Vec<KeyframeTiming>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InferenceReport {
    pub passes: Vec<PassReport>,
    pub seconds: f64,
}

impl InferenceReport {
    pub fn degenerate_messages(&self) -> u64 {
        self.passes.iter().flat_map(|p| &p.keyframes).map(|k| k.degenerate_messages).sum()
    }

    pub fn skipped_rays(&self) -> u64 {
        self.passes.iter().flat_map(|p| &p.keyframes).map(|k| k.skipped_rays).sum()
    }
}

#[derive(Default)]
struct RayScratch {
    steps: Vec<SparseStep>,
    nu: Vec<f64>,
    incoming: Vec<MessagePair>,
    outgoing: Vec<MessagePair>,
    suffix: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct RayCounts {
    rays: u64,
    skipped: u64,
    degenerate: u64,
}

impl std::ops::Add for RayCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { rays: self.rays + o.rays, skipped: self.skipped + o.skipped, degenerate: self.degenerate + o.degenerate }
    }
}

/// A sparse grid together with the keyframes and sensor model that drive it.
#[derive(Debug)]
pub struct MrfMap {
    grid: SparseGrid,
    intrinsics: CameraIntrinsics,
    model: SensorNoiseModel,
    config: InferenceConfig,
    keyframes: Vec<Keyframe>,
}

impl MrfMap {
    pub fn new(
        grid_config: GridConfig,
        intrinsics: CameraIntrinsics,
        model: SensorNoiseModel,
        config: InferenceConfig,
    ) -> Result<Self, MrfError> {
        config.validate()?;
        intrinsics.validate()?;
        let mut grid = SparseGrid::new(grid_config, config.prior)?;
        grid.set_message_floor(config.message_floor);
        Ok(Self { grid, intrinsics, model, config, keyframes: Vec::new() })
    }

    pub fn grid(&self) -> &SparseGrid {
        &self.grid
    }

    pub fn into_grid(self) -> SparseGrid {
        self.grid
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.config
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn model(&self) -> &SensorNoiseModel {
        &self.model
    }

    /// Allocates around the keyframe's points and adds its message buffer.
    pub fn add_keyframe(&mut self, keyframe: Keyframe) -> Result<AllocationStats, MrfError> {
        let got = (keyframe.depth.width(), keyframe.depth.height());
        let expected = (self.intrinsics.width, self.intrinsics.height);
        if got != expected {
            return Err(MrfError::ImageMismatch { id: keyframe.id, got, expected });
        }
        let stats = self.grid.allocate_for_depth_image(
            &self.intrinsics,
            &keyframe.pose,
            &keyframe.depth,
            &self.model,
            self.config.sigma_cutoff,
        );
        self.grid.add_keyframe_buffer(keyframe.id);
        self.keyframes.push(keyframe);
        Ok(stats)
    }

    /// Builds the factor for one pixel, or `None` if the ray is invalid or
    /// crosses no allocated voxel.
    pub fn ray_factor(&self, k: usize, u: u32, v: u32) -> Option<RayFactor> {
        let mut scratch = RayScratch::default();
        self.fill_factor(k, u, v, &mut scratch).then(|| RayFactor {
            keyframe: k,
            steps: scratch.steps,
            nu: scratch.nu,
        })
    }

    fn fill_factor(&self, k: usize, u: u32, v: u32, sc: &mut RayScratch) -> bool {
        let kf = &self.keyframes[k];
        let raw = kf.depth.raw(u, v);
        if raw == 0 {
            return false;
        }
        let Ok(ray) = pixel_to_ray(&self.intrinsics, &kf.pose, u, v, raw as f64) else { return false };
        let z = ray.measured_depth;
        let s_max = z + self.config.sigma_cutoff * self.model.sigma(u, v, z);
        if self.grid.traverse_allocated(&ray, s_max, &mut sc.steps).is_err() || sc.steps.is_empty() {
            return false;
        }
        sc.nu.clear();
        sc.nu.extend(sc.steps.iter().map(|s| self.model.nu(u, v, s.cell_depth(), z)));
        true
    }

    fn process_keyframe(&mut self, k: usize) -> KeyframeTiming {
        let start = Instant::now();
        let incoming = self.grid.incoming_all(Some(k));
        let floor = self.grid.message_floor();
        self.grid.keyframes_mut()[k].reset();
        let this = &*self;
        let buffer = this.grid.keyframe_buffer(k).expect("keyframe buffer exists");
        let side = this.grid.config().voxel_side;
        let weighting = this.config.weighting;
        let kf = &this.keyframes[k];
        let counts = (0..kf.depth.height())
            .into_par_iter()
            .map_init(RayScratch::default, |sc, v| {
                let mut c = RayCounts::default();
                for u in 0..kf.depth.width() {
                    if kf.depth.raw(u, v) == 0 {
                        continue;
                    }
                    if !this.fill_factor(k, u, v, sc) {
                        c.skipped += 1;
                        continue;
                    }
                    c.rays += 1;
                    sc.incoming.clear();
                    sc.incoming.extend(sc.steps.iter().map(|s| incoming[s.slot as usize]));
                    c.degenerate +=
                        occupancy_messages_into(&sc.nu, &sc.incoming, &mut sc.outgoing, &mut sc.suffix) as u64;
                    for (s, m) in sc.steps.iter().zip(&sc.outgoing) {
                        let w = match weighting {
                            MessageWeighting::Uniform => 1.0,
                            MessageWeighting::Length => s.length() / side,
                        };
                        buffer.accumulate_slot(s.slot as usize, *m, w);
                    }
                }
                c
            })
            .reduce(RayCounts::default, |a, b| a + b);
        let id = self.keyframes[k].id;
        self.grid.keyframes_mut()[k].finalize(floor);
        KeyframeTiming {
            keyframe_id: id,
            seconds: start.elapsed().as_secs_f64(),
            rays: counts.rays,
            skipped_rays: counts.skipped,
            degenerate_messages: counts.degenerate,
        }
    }

    /// Runs the configured number of passes over every keyframe in insertion
    /// order, then stores the marginals.
    pub fn run_inference(&mut self) -> InferenceReport {
        let start = Instant::now();
        let mut report = InferenceReport::default();
        for pass in 1..=self.config.passes {
            let pass_start = Instant::now();
            let keyframes = (0..self.keyframes.len()).map(|k| self.process_keyframe(k)).collect();
            self.grid.update_marginals();
            report.passes.push(PassReport { pass, seconds: pass_start.elapsed().as_secs_f64(), keyframes });
            log::info!("pass {pass} done in {:.2} s", report.passes.last().unwrap().seconds);
        }
        report.seconds = start.elapsed().as_secs_f64();
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_io::DepthImage;
    use crate::geometry::{Pose, Vec3, VoxelIndex};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mp(m0: f64, m1: f64) -> MessagePair {
        MessagePair { m0, m1 }
    }

    fn random_factor(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<MessagePair>) {
        let nu = (0..n).map(|_| 1.0 - rng.random::<f64>()).collect();
        let inc = (0..n)
            .map(|_| {
                let p: f64 = rng.random();
                mp(1.0 - p, p)
            })
            .collect();
        (nu, inc)
    }

    fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
        let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
    }

    #[test]
    fn depth_message_examples() {
        assert_eq!(depth_message(&[0.4], &[mp(0.5, 0.5)]).unwrap(), vec![0.2]);
        let d = depth_message(&[0.3, 0.6], &[mp(0.9, 0.1), mp(0.9, 0.1)]).unwrap();
        assert!((d[0] - 0.03).abs() < 1e-15 && (d[1] - 0.054).abs() < 1e-15);
        assert!(depth_message(&[0.3], &[]).is_err());
    }

    #[test]
    fn occupancy_message_examples() {
        let raw = occupancy_messages_raw(&[0.3, 0.6], &[mp(0.9, 0.1), mp(0.9, 0.1)]).unwrap();
        assert_eq!(raw[0].m1, 0.3);
        assert!((raw[0].m0 - 0.06).abs() < 1e-15);
        let (out, _) = occupancy_messages(&[0.3, 0.6], &[mp(0.9, 0.1), mp(0.9, 0.1)]).unwrap();
        assert!((out[0].m0 - 1.0 / 6.0).abs() < 1e-12 && (out[0].m1 - 5.0 / 6.0).abs() < 1e-12);
        let raw = occupancy_messages_raw(&[0.7, 0.2, 0.9], &[mp(0.3, 0.7); 3]).unwrap();
        assert_eq!(raw[0].m1, 0.7);
    }

    #[test]
    fn oracle_geometric_decay() {
        let o = brute_force_oracle(&[1.0; 3], &[MessagePair::UNIFORM; 3]).unwrap();
        assert!(rel_close(&o.depth, &[0.5, 0.25, 0.125], 1e-15));
        assert!(matches!(brute_force_oracle(&[1.0; 13], &[MessagePair::UNIFORM; 13]), Err(MrfError::TooLarge(13))));
    }

    #[test]
    fn oracle_single_voxel() {
        let o = brute_force_oracle(&[0.4], &[mp(0.5, 0.5)]).unwrap();
        assert_eq!(o.depth, vec![0.2]);
        assert_eq!(o.occupancy[0], mp(0.0, 0.4));
    }

    #[test]
    fn closed_forms_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..2000 {
            let n = rng.random_range(1..=ORACLE_MAX_STEPS);
            let (nu, inc) = random_factor(&mut rng, n);
            let oracle = brute_force_oracle(&nu, &inc).unwrap();
            assert!(rel_close(&depth_message(&nu, &inc).unwrap(), &oracle.depth, 1e-12));
            let raw = occupancy_messages_raw(&nu, &inc).unwrap();
            let flat = |v: &[MessagePair]| v.iter().flat_map(|m| [m.m0, m.m1]).collect::<Vec<_>>();
            assert!(rel_close(&flat(&raw), &flat(&oracle.occupancy), 1e-12));
        }
    }

    #[test]
    fn visibility_saturation() {
        let nu = [0.5, 0.9, 0.8, 0.7];
        let inc = [mp(0.4, 0.6), mp(0.0, 1.0), mp(0.7, 0.3), mp(0.2, 0.8)];
        let (out, _) = occupancy_messages(&nu, &inc).unwrap();
        assert_eq!(out[2], MessagePair::UNIFORM);
        assert_eq!(out[3], MessagePair::UNIFORM);
        assert_ne!(out[1], MessagePair::UNIFORM);
    }

    #[test]
    fn degenerate_messages_are_counted() {
        let (out, degenerate) = occupancy_messages(&[0.0, 0.0], &[mp(0.5, 0.5); 2]).unwrap();
        assert_eq!(degenerate, 2);
        assert!(out.iter().all(|m| *m == MessagePair::UNIFORM));
    }

    #[test]
    fn scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (nu, inc) = random_factor(&mut rng, 20);
            let scaled: Vec<f64> = nu.iter().map(|v| v * 1e-7).collect();
            let (a, _) = occupancy_messages(&nu, &inc).unwrap();
            let (b, _) = occupancy_messages(&scaled, &inc).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x.m1 - y.m1).abs() < 1e-12);
            }
        }
    }

    fn frontal_map(pixels: &[(u32, u32)], z: f64, passes: u32) -> (MrfMap, CameraIntrinsics) {
        let intr = CameraIntrinsics::new(50.0, 50.0, 15.5, 11.5, 32, 24, 5000.0).unwrap();
        let model = SensorNoiseModel::constant(0.01, 32, 24, 0.1, 10.0).unwrap();
        let cfg = GridConfig::new([-0.8, -0.8, -0.025], 0.05, 8, [32, 32, 48]).unwrap();
        let ic = InferenceConfig { passes, ..Default::default() };
        let mut map = MrfMap::new(cfg, intr, model, ic).unwrap();
        let mut depth = DepthImage::empty(32, 24, 5000.0);
        for &(u, v) in pixels {
            depth.set_raw(u, v, (z * 5000.0) as u16);
        }
        map.add_keyframe(Keyframe { id: 0, timestamp: 0.0, pose: Pose::identity(), depth }).unwrap();
        (map, intr)
    }

    #[test]
    fn single_ray_posterior() {
        let (mut map, _) = frontal_map(&[(16, 12)], 2.0, 1);
        let report = map.run_inference();
        assert_eq!(report.passes[0].keyframes[0].rays, 1);
        let f = map.ray_factor(0, 16, 12).unwrap();
        let m = f.nu.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let g = map.grid();
        let p = |i: usize| g.belief_of_slot(f.steps[i].slot as usize).p_occ;
        assert!(p(m) > 0.5, "surface {}", p(m));
        for k in 0..m {
            assert!(p(k) < 0.1, "voxel {k}: {}", p(k));
        }
    }

    #[test]
    fn no_valid_pixels_keeps_prior() {
        let (mut map, _) = frontal_map(&[], 2.0, 3);
        let report = map.run_inference();
        assert_eq!(report.passes.len(), 3);
        assert_eq!(map.grid().allocated_voxels(), 0);
    }

    #[test]
    fn inference_is_reproducible_and_monotone() {
        let pixels: Vec<(u32, u32)> = (0..24).flat_map(|v| (0..32).map(move |u| (u, v))).collect();
        let run = |passes| {
            let (mut map, _) = frontal_map(&pixels, 2.0, passes);
            map.run_inference();
            map
        };
        let a = run(3);
        let b = run(3);
        let pa: Vec<f64> = (0..a.grid().allocated_voxels()).map(|s| a.grid().belief_of_slot(s).p_occ).collect();
        let pb: Vec<f64> = (0..b.grid().allocated_voxels()).map(|s| b.grid().belief_of_slot(s).p_occ).collect();
        assert_eq!(pa, pb);
        let surface = a.grid().grid_geometry().voxel_of(&Vec3::new(0.0, 0.0, 2.0)).unwrap();
        let mut last = 0.0;
        for passes in 1..=3 {
            let m = run(passes);
            let p = m.grid().marginal(surface).unwrap();
            assert!(p >= last - 1e-12, "pass {passes}: {p} < {last}");
            last = p;
        }
        assert!(last > 0.9);
    }

    /// Two rays sharing one voxel, against a hand-rolled schedule over the
    /// same factors.
    #[test]
    fn two_crossing_rays_reinforce() {
        let intr = CameraIntrinsics::new(50.0, 50.0, 16.0, 12.0, 32, 24, 5000.0).unwrap();
        let model = SensorNoiseModel::constant(0.01, 32, 24, 0.1, 10.0).unwrap();
        let cfg = GridConfig::new([-1.6, -1.6, -1.6], 0.05, 8, [64, 64, 64]).unwrap();
        let target = Vec3::new(0.025, 0.025, 0.025);
        let v = VoxelIndex([32, 32, 32]);
        let ic = InferenceConfig { passes: 2, ..Default::default() };
        let mut map = MrfMap::new(cfg, intr, model, ic).unwrap();
        for (id, eye) in [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)].into_iter().enumerate() {
            let pose = Pose::look_at(target + eye, target, Vec3::new(0.0, 0.0, 1.0)).unwrap();
            let mut d = DepthImage::empty(32, 24, 5000.0);
            d.set_raw(16, 12, 5000);
            map.add_keyframe(Keyframe { id: id as u32, timestamp: id as f64, pose, depth: d }).unwrap();
        }
        map.run_inference();
        let factors = [map.ray_factor(0, 16, 12).unwrap(), map.ray_factor(1, 16, 12).unwrap()];
        let vs = map.grid().slot_of(v).unwrap() as u32;
        assert!(factors.iter().all(|f| f.steps.iter().any(|s| s.slot == vs)));

        let prior = MessagePair::prior(0.1);
        let mut sent: [Vec<MessagePair>; 2] = Default::default();
        let lookup = |k: usize, sent: &[Vec<MessagePair>; 2], slot: u32| {
            factors[k].steps.iter().position(|s| s.slot == slot).and_then(|i| sent[k].get(i).copied())
        };
        for _pass in 0..2 {
            for k in 0..2 {
                let other = 1 - k;
                let inc: Vec<MessagePair> = factors[k]
                    .steps
                    .iter()
                    .map(|s| match lookup(other, &sent, s.slot) {
                        Some(m) => MessagePair::new(prior.m0 * m.m0, prior.m1 * m.m1).normalized(),
                        None => prior,
                    })
                    .collect();
                sent[k] = occupancy_messages(&factors[k].nu, &inc).unwrap().0;
            }
        }
        let (a, b) = (lookup(0, &sent, vs).unwrap(), lookup(1, &sent, vs).unwrap());
        let expected = MessagePair::new(prior.m0 * a.m0 * b.m0, prior.m1 * a.m1 * b.m1).normalized().m1;
        let got = map.grid().marginal(v).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        let single = MessagePair::new(prior.m0 * a.m0, prior.m1 * a.m1).normalized().m1;
        assert!(got > single && single > 0.5, "{got} <= {single}");
    }
}
