//! Independent-cell log-odds occupancy grid, used as a comparison baseline.

use std::sync::atomic::{AtomicU8, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::DepthImage;
use crate::geometry::{pixel_to_ray, CameraIntrinsics, GridGeometry, Pose, Ray, VoxelIndex};
use crate::sparse_grid::{BrickTopology, GridConfig, GridError, OccupancyField};

const MARK_MISS: u8 = 1;
const MARK_HIT: u8 = 2;

#[derive(Debug, Error)]
pub enum LogOddsError {
    #[error("invalid log-odds config: {0}")]
    InvalidConfig(String),
    #[error("image is {got:?}, intrinsics say {expected:?}")]
    ImageMismatch { got: (u32, u32), expected: (u32, u32) },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn sigmoid(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogOddsConfig {
    pub p_hit: f64,
    pub p_miss: f64,
    pub clamp_min: f64,
    pub clamp_max: f64,
    /// Rays longer than this only carry free-space updates up to it (meters).
    pub max_range: Option<f64>,
}

impl Default for LogOddsConfig {
    fn default() -> Self {
        Self { p_hit: 0.7, p_miss: 0.4, clamp_min: 0.12, clamp_max: 0.97, max_range: None }
    }
}

impl LogOddsConfig {
    pub fn validate(&self) -> Result<(), LogOddsError> {
        let bad = |m: String| Err(LogOddsError::InvalidConfig(m));
        if !(0.0 < self.p_miss && self.p_miss < 0.5 && 0.5 < self.p_hit && self.p_hit < 1.0) {
            return bad(format!("need 0 < p_miss < 0.5 < p_hit < 1, got {} and {}", self.p_miss, self.p_hit));
        }
        if !(0.0 < self.clamp_min && self.clamp_min < self.clamp_max && self.clamp_max < 1.0) {
            return bad(format!("need 0 < clamp_min < clamp_max < 1, got {} and {}", self.clamp_min, self.clamp_max));
        }
        if self.max_range.is_some_and(|r| !(r > 0.0)) {
            return bad("max_range must be positive".into());
        }
        Ok(())
    }
}

/// Sparse grid of clamped log-odds; `NaN` marks a never-updated voxel.
#[derive(Debug)]
pub struct LogOddsMap {
    config: GridConfig,
    geometry: GridGeometry,
    params: LogOddsConfig,
    topology: BrickTopology,
    log_odds: Vec<f64>,
    marks: Vec<AtomicU8>,
}

impl LogOddsMap {
    pub fn new(config: GridConfig, params: LogOddsConfig) -> Result<Self, LogOddsError> {
        config.validate()?;
        params.validate()?;
        Ok(Self {
            config,
            geometry: config.geometry(),
            params,
            topology: BrickTopology::new(&config),
            log_odds: Vec::new(),
            marks: Vec::new(),
        })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn params(&self) -> &LogOddsConfig {
        &self.params
    }

    pub fn topology(&self) -> &BrickTopology {
        &self.topology
    }

    pub fn allocated_voxels(&self) -> usize {
        self.log_odds.len()
    }

    /// Log-odds of a voxel, `None` if never updated.
    pub fn log_odds(&self, voxel: VoxelIndex) -> Option<f64> {
        self.topology.slot_of(voxel).map(|s| self.log_odds[s]).filter(|l| !l.is_nan())
    }

    pub fn log_odds_of_slot(&self, slot: usize) -> f64 {
        self.log_odds[slot]
    }

    fn allocate(&mut self, brick: [u32; 3]) -> Result<(), GridError> {
        if self.topology.allocate(brick)?.is_some() {
            let n = self.topology.slot_count();
            self.log_odds.resize(n, f64::NAN);
            self.marks.resize_with(n, AtomicU8::default);
        }
        Ok(())
    }

    /// Segment of the ray that receives updates, clipped to the grid, and
    /// whether its far end is a hit.
    fn update_segment(&self, ray: &Ray) -> Option<(f64, f64, bool)> {
        let z = ray.measured_depth;
        let (end, hit) = match self.params.max_range {
            Some(r) if z > r => (r, false),
            _ => (z, true),
        };
        let (t0, t1) = self.geometry.clip_ray(&ray.origin, &ray.direction)?;
        let (a, b) = (t0.max(0.0), t1.min(end));
        let hit = hit && self.geometry.voxel_of(&ray.at(z)).is_some();
        (b > a || hit).then_some((a, b, hit))
    }

    /// Applies one scan: voxels crossed before the endpoint voxel get a miss,
    /// the endpoint voxel a hit, each voxel at most once per scan.
    pub fn integrate_scan(&mut self, intr: &CameraIntrinsics, pose: &Pose, depth: &DepthImage) -> Result<(), LogOddsError> {
        let got = (depth.width(), depth.height());
        if got != (intr.width, intr.height) {
            return Err(LogOddsError::ImageMismatch { got, expected: (intr.width, intr.height) });
        }
        let rays = |v: u32| {
            (0..depth.width()).filter_map(move |u| match depth.raw(u, v) {
                0 => None,
                raw => pixel_to_ray(intr, pose, u, v, raw as f64).ok(),
            })
        };

        let mut needed: Vec<u32> = (0..depth.height())
            .into_par_iter()
            .flat_map_iter(|v| {
                let mut set = Vec::new();
                for ray in rays(v) {
                    if let Some((a, b, hit)) = self.update_segment(&ray) {
                        if b > a {
                            self.topology.bricks_along(&self.geometry, &ray, a, b, &mut set);
                        }
                        if hit {
                            let e = self.geometry.voxel_of(&ray.at(ray.measured_depth)).unwrap();
                            let bs = self.config.brick_size;
                            set.push(self.topology.brick_linear([e.0[0] / bs, e.0[1] / bs, e.0[2] / bs]) as u32);
                        }
                    }
                }
                set.sort_unstable();
                set.dedup();
                set
            })
            .collect();
        needed.sort_unstable();
        needed.dedup();
        for lin in needed {
            self.allocate(self.topology.brick_of_linear(lin as usize))?;
        }

        (0..depth.height()).into_par_iter().for_each(|v| {
            for ray in rays(v) {
                let Some((a, b, hit)) = self.update_segment(&ray) else { continue };
                let end = if hit { self.geometry.voxel_of(&ray.at(ray.measured_depth)) } else { None };
                let end_slot = end.and_then(|e| self.topology.slot_of(e));
                if b > a {
                    self.topology.walk_allocated(&self.geometry, &ray, a, b, |slot, _, _| {
                        if Some(slot) != end_slot {
                            self.marks[slot].fetch_or(MARK_MISS, Ordering::Relaxed);
                        }
                    });
                }
                if let Some(s) = end_slot {
                    self.marks[s].fetch_or(MARK_HIT, Ordering::Relaxed);
                }
            }
        });

        let (l_hit, l_miss) = (logit(self.params.p_hit), logit(self.params.p_miss));
        let (lo, hi) = (logit(self.params.clamp_min), logit(self.params.clamp_max));
        self.log_odds.par_iter_mut().zip(self.marks.par_iter_mut()).for_each(|(l, m)| {
            let mark = std::mem::take(m.get_mut());
            let delta = if mark & MARK_HIT != 0 {
                l_hit
            } else if mark & MARK_MISS != 0 {
                l_miss
            } else {
                return;
            };
            let base = if l.is_nan() { 0.0 } else { *l };
            *l = (base + delta).clamp(lo, hi);
        });
        Ok(())
    }

    /// Sets a voxel's log-odds directly, allocating its brick.
    pub fn set_log_odds(&mut self, voxel: VoxelIndex, l: f64) -> Result<(), GridError> {
        let b = self.config.brick_size;
        if !self.topology.voxel_in_bounds(voxel) {
            return Err(GridError::OutOfBounds(voxel.0));
        }
        self.allocate([voxel.0[0] / b, voxel.0[1] / b, voxel.0[2] / b])?;
        let s = self.topology.slot_of(voxel).expect("just allocated");
        self.log_odds[s] = l;
        Ok(())
    }

    /// Occupancy probability of a voxel; unobserved voxels report 0.5.
    pub fn probability(&self, voxel: VoxelIndex) -> f64 {
        self.log_odds(voxel).map_or(0.5, sigmoid)
    }
}

impl OccupancyField for LogOddsMap {
    fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    fn occupancy(&self, voxel: VoxelIndex) -> Option<f64> {
        self.log_odds(voxel).map(sigmoid)
    }

    fn unknown_probability(&self) -> f64 {
        0.5
    }
}
