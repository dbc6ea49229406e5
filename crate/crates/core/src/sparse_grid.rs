//! Brick-sparse voxel storage.
//!
//! The grid is split into cubic bricks of `B³` voxels. A dense brick table maps
//! brick coordinates to a slot in a pool; only allocated bricks carry
//! per-voxel state. Voxel state is stored structure-of-arrays by *slot*
//! (`brick_slot * B³ + local index`), one belief array plus one accumulator
//! array per keyframe.
//!
//! Per-keyframe accumulators are fixed-point (`2^-40`) integer sums so that
//! concurrent accumulation is order independent and bit reproducible.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::DepthImage;
use crate::geometry::{
    pixel_to_ray, CameraIntrinsics, CellWalk, GeometryError, GridGeometry, Pose, Ray, Vec3, VoxelIndex,
};
use crate::sensor_model::SensorNoiseModel;

pub const DEFAULT_BRICK_SIZE: u32 = 8;
pub const DEFAULT_PRIOR: f64 = 0.1;
pub const DEFAULT_MESSAGE_FLOOR: f64 = 1e-30;

const UNALLOCATED: u32 = u32::MAX;
const FIXED_SCALE: f64 = (1u64 << 40) as f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid grid configuration: {0}")]
    InvalidConfig(String),
    #[error("voxel {0:?} is not allocated")]
    UnallocatedVoxel([u32; 3]),
    #[error("voxel {0:?} is outside the grid")]
    OutOfBounds([u32; 3]),
    #[error("no keyframe buffer {0}")]
    UnknownKeyframe(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Minimum corner of voxel `[0, 0, 0]` (meters).
    pub origin: [f64; 3],
    pub voxel_side: f64,
    pub brick_size: u32,
    pub dims: [u32; 3],
}

impl GridConfig {
    pub fn new(origin: [f64; 3], voxel_side: f64, brick_size: u32, dims: [u32; 3]) -> Result<Self, GridError> {
        let cfg = Self { origin, voxel_side, brick_size, dims };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Smallest grid with side `voxel_side` covering `[min, max]`, dims rounded
    /// up to whole bricks.
    pub fn from_bounds(min: [f64; 3], max: [f64; 3], voxel_side: f64, brick_size: u32) -> Result<Self, GridError> {
        if !(voxel_side > 0.0) || brick_size == 0 {
            return Err(GridError::InvalidConfig("voxel side and brick size must be positive".into()));
        }
        let mut dims = [0u32; 3];
        for k in 0..3 {
            let extent = max[k] - min[k];
            if !(extent > 0.0 && extent.is_finite()) {
                return Err(GridError::InvalidConfig(format!("empty extent on axis {k}")));
            }
            let n = (extent / voxel_side - 1e-9).ceil().max(1.0) as u64;
            let b = brick_size as u64;
            dims[k] = u32::try_from(n.div_ceil(b) * b)
                .map_err(|_| GridError::InvalidConfig("grid too large".into()))?;
        }
        Self::new(min, voxel_side, brick_size, dims)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.voxel_side > 0.0 && self.voxel_side.is_finite()) {
            return Err(GridError::InvalidConfig(format!("voxel side {}", self.voxel_side)));
        }
        if self.brick_size < 2 || !self.brick_size.is_power_of_two() {
            return Err(GridError::InvalidConfig(format!("brick size {} is not a power of two >= 2", self.brick_size)));
        }
        if self.origin.iter().any(|c| !c.is_finite()) {
            return Err(GridError::InvalidConfig("non-finite origin".into()));
        }
        for (k, &d) in self.dims.iter().enumerate() {
            if d == 0 || d % self.brick_size != 0 {
                return Err(GridError::InvalidConfig(format!(
                    "dims[{k}] = {d} is not a positive multiple of {}",
                    self.brick_size
                )));
            }
        }
        let bricks: u64 = self.brick_dims().iter().map(|&b| b as u64).product();
        if bricks >= UNALLOCATED as u64 {
            return Err(GridError::InvalidConfig("too many bricks".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            origin: Vec3::from(self.origin),
            voxel_side: self.voxel_side,
            dims: self.dims,
        }
    }

    pub fn brick_dims(&self) -> [u32; 3] {
        [
            self.dims[0] / self.brick_size,
            self.dims[1] / self.brick_size,
            self.dims[2] / self.brick_size,
        ]
    }

    pub fn voxels_per_brick(&self) -> usize {
        (self.brick_size as usize).pow(3)
    }
}

/// Two-state message `(weight for o=0, weight for o=1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MessagePair {
    pub m0: f64,
    pub m1: f64,
}

impl MessagePair {
    pub const UNIFORM: MessagePair = MessagePair { m0: 0.5, m1: 0.5 };

    pub fn new(m0: f64, m1: f64) -> Self {
        Self { m0, m1 }
    }

    /// Prior factor `(1 - γ, γ)`.
    pub fn prior(gamma: f64) -> Self {
        Self { m0: 1.0 - gamma, m1: gamma }
    }

    /// Scaled to sum to one. Returns `None` when both weights vanish or are
    /// not finite.
    pub fn try_normalized(self) -> Option<Self> {
        let s = self.m0 + self.m1;
        if s > 0.0 && s.is_finite() && self.m0 >= 0.0 && self.m1 >= 0.0 {
            Some(Self { m0: self.m0 / s, m1: self.m1 / s })
        } else {
            None
        }
    }

    /// Scaled to sum to one; degenerate pairs become uniform.
    pub fn normalized(self) -> Self {
        self.try_normalized().unwrap_or(Self::UNIFORM)
    }

    /// Normalized pair from log weights.
    pub fn from_log(l0: f64, l1: f64) -> Self {
        let m = l0.max(l1);
        if !m.is_finite() {
            return Self::UNIFORM;
        }
        let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
        let s = e0 + e1;
        Self { m0: e0 / s, m1: e1 / s }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelBelief {
    pub prior: f64,
    pub p_occ: f64,
}

#[derive(Debug, Default)]
struct Accumulator {
    m0: AtomicU64,
    m1: AtomicU64,
    rays: AtomicU32,
}

/// Average outgoing messages of one keyframe, per voxel slot.
#[derive(Debug)]
pub struct KeyframeBuffer {
    keyframe_id: u32,
    accum: Vec<Accumulator>,
    /// `ln` of the floored average, filled by [`KeyframeBuffer::finalize`].
    log_avg: Option<Vec<[f64; 2]>>,
}

impl KeyframeBuffer {
    fn new(keyframe_id: u32, slots: usize) -> Self {
        let mut accum = Vec::new();
        accum.resize_with(slots, Accumulator::default);
        Self { keyframe_id, accum, log_avg: None }
    }

    pub fn keyframe_id(&self) -> u32 {
        self.keyframe_id
    }

    fn grow(&mut self, slots: usize) {
        self.accum.resize_with(slots, Accumulator::default);
        self.log_avg = None;
    }

    /// Zeroes every accumulator.
    pub fn reset(&mut self) {
        self.accum.par_iter_mut().for_each(|a| *a = Accumulator::default());
        self.log_avg = None;
    }

    /// Adds one normalized message with weight `w`. Safe under concurrent callers.
    #[inline]
    pub fn accumulate_slot(&self, slot: usize, msg: MessagePair, weight: f64) {
        let a = &self.accum[slot];
        a.m0.fetch_add((msg.m0 * weight * FIXED_SCALE).round() as u64, Ordering::Relaxed);
        a.m1.fetch_add((msg.m1 * weight * FIXED_SCALE).round() as u64, Ordering::Relaxed);
        a.rays.fetch_add(1, Ordering::Relaxed);
    }

    pub fn ray_count(&self, slot: usize) -> u32 {
        self.accum[slot].rays.load(Ordering::Relaxed)
    }

    /// Weighted mean of the accumulated messages; uniform if none.
    pub fn average_slot(&self, slot: usize) -> MessagePair {
        let a = &self.accum[slot];
        let s0 = a.m0.load(Ordering::Relaxed);
        let s1 = a.m1.load(Ordering::Relaxed);
        if s0 == 0 && s1 == 0 {
            return MessagePair::UNIFORM;
        }
        let t = (s0 + s1) as f64;
        MessagePair { m0: s0 as f64 / t, m1: s1 as f64 / t }
    }

    #[inline]
    fn compute_log_average(&self, slot: usize, floor: f64) -> [f64; 2] {
        let a = &self.accum[slot];
        let s0 = a.m0.load(Ordering::Relaxed);
        let s1 = a.m1.load(Ordering::Relaxed);
        if s0 == 0 && s1 == 0 {
            return [0.0, 0.0];
        }
        let t = (s0 + s1) as f64;
        [(s0 as f64 / t).max(floor).ln(), (s1 as f64 / t).max(floor).ln()]
    }

    #[inline]
    fn log_average(&self, slot: usize, floor: f64) -> [f64; 2] {
        match &self.log_avg {
            Some(cache) => cache[slot],
            None => self.compute_log_average(slot, floor),
        }
    }

    /// Caches the log averages; called once accumulation for a pass is complete.
    pub fn finalize(&mut self, floor: f64) {
        let cache = (0..self.accum.len()).into_par_iter().map(|s| self.compute_log_average(s, floor)).collect();
        self.log_avg = Some(cache);
    }

    pub fn slots(&self) -> usize {
        self.accum.len()
    }
}

/// One crossing of an allocated voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseStep {
    pub slot: u32,
    pub s_entry: f64,
    pub s_exit: f64,
}

impl SparseStep {
    #[inline]
    pub fn length(&self) -> f64 {
        self.s_exit - self.s_entry
    }

    #[inline]
    pub fn cell_depth(&self) -> f64 {
        0.5 * (self.s_entry + self.s_exit)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationStats {
    pub new_bricks: usize,
    pub valid_points: usize,
    pub out_of_bounds_points: usize,
}

/// Read access to a voxel occupancy field, shared by every map representation.
pub trait OccupancyField: Sync {
    fn geometry(&self) -> GridGeometry;
    /// Occupancy probability, or `None` for unobserved or unallocated space.
    fn occupancy(&self, voxel: VoxelIndex) -> Option<f64>;
    /// Probability reported for space with no information.
    fn unknown_probability(&self) -> f64;

    fn probability(&self, voxel: VoxelIndex) -> f64 {
        self.occupancy(voxel).unwrap_or_else(|| self.unknown_probability())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupiedVoxel {
    pub voxel: VoxelIndex,
    pub center: [f64; 3],
    pub p_occ: f64,
}

/// Brick table and pool shared by every sparse map representation.
///
/// Voxel state lives in flat arrays indexed by *slot*:
/// `pool index * B³ + (lz * B + ly) * B + lx`.
#[derive(Debug, Clone)]
pub struct BrickTopology {
    brick_size: u32,
    dims: [u32; 3],
    brick_dims: [u32; 3],
    /// Brick linear index to pool index, `UNALLOCATED` if absent.
    table: Vec<u32>,
    /// Pool index to brick coordinates.
    bricks: Vec<[u32; 3]>,
}

impl BrickTopology {
    pub fn new(config: &GridConfig) -> Self {
        let brick_dims = config.brick_dims();
        let n: usize = brick_dims.iter().map(|&b| b as usize).product();
        Self { brick_size: config.brick_size, dims: config.dims, brick_dims, table: vec![UNALLOCATED; n], bricks: Vec::new() }
    }

    pub fn brick_dims(&self) -> [u32; 3] {
        self.brick_dims
    }

    pub fn voxels_per_brick(&self) -> usize {
        (self.brick_size as usize).pow(3)
    }

    pub fn brick_count(&self) -> usize {
        self.bricks.len()
    }

    pub fn slot_count(&self) -> usize {
        self.bricks.len() * self.voxels_per_brick()
    }

    pub fn table_bytes(&self) -> usize {
        self.table.len() * std::mem::size_of::<u32>() + self.bricks.len() * std::mem::size_of::<[u32; 3]>()
    }

    #[inline]
    pub fn brick_linear(&self, b: [u32; 3]) -> usize {
        ((b[2] as usize * self.brick_dims[1] as usize) + b[1] as usize) * self.brick_dims[0] as usize + b[0] as usize
    }

    #[inline]
    pub fn brick_of_linear(&self, lin: usize) -> [u32; 3] {
        let (bx, by) = (self.brick_dims[0] as usize, self.brick_dims[1] as usize);
        [(lin % bx) as u32, ((lin / bx) % by) as u32, (lin / (bx * by)) as u32]
    }

    #[inline]
    pub fn brick_in_bounds(&self, b: [u32; 3]) -> bool {
        b.iter().zip(self.brick_dims.iter()).all(|(b, d)| b < d)
    }

    #[inline]
    pub fn voxel_in_bounds(&self, v: VoxelIndex) -> bool {
        v.0.iter().zip(self.dims.iter()).all(|(a, d)| a < d)
    }

    /// Pool index of an allocated brick.
    #[inline]
    pub fn pool_of_linear(&self, lin: usize) -> Option<usize> {
        match self.table[lin] {
            UNALLOCATED => None,
            p => Some(p as usize),
        }
    }

    pub fn is_allocated(&self, b: [u32; 3]) -> bool {
        self.brick_in_bounds(b) && self.table[self.brick_linear(b)] != UNALLOCATED
    }

    /// Allocates a brick; returns its pool index if it was new.
    pub fn allocate(&mut self, b: [u32; 3]) -> Result<Option<usize>, GridError> {
        if !self.brick_in_bounds(b) {
            return Err(GridError::OutOfBounds(b));
        }
        let lin = self.brick_linear(b);
        if self.table[lin] != UNALLOCATED {
            return Ok(None);
        }
        let pool = self.bricks.len();
        self.table[lin] = pool as u32;
        self.bricks.push(b);
        Ok(Some(pool))
    }

    #[inline]
    pub fn slot_of(&self, voxel: VoxelIndex) -> Option<usize> {
        if !self.voxel_in_bounds(voxel) {
            return None;
        }
        let b = self.brick_size;
        let pool = self.table[self.brick_linear([voxel.0[0] / b, voxel.0[1] / b, voxel.0[2] / b])];
        if pool == UNALLOCATED {
            return None;
        }
        let l = [voxel.0[0] % b, voxel.0[1] % b, voxel.0[2] % b];
        Some(pool as usize * self.voxels_per_brick() + ((l[2] * b + l[1]) * b + l[0]) as usize)
    }

    pub fn voxel_of_slot(&self, slot: usize) -> VoxelIndex {
        let vpb = self.voxels_per_brick();
        let b = self.brick_size;
        let brick = self.bricks[slot / vpb];
        let local = (slot % vpb) as u32;
        VoxelIndex([brick[0] * b + local % b, brick[1] * b + (local / b) % b, brick[2] * b + local / (b * b)])
    }

    /// Allocated bricks as `(brick coordinates, pool index)` in ascending
    /// `(z, y, x)` order.
    pub fn bricks_sorted(&self) -> Vec<([u32; 3], usize)> {
        let mut v: Vec<([u32; 3], usize)> = self.bricks.iter().enumerate().map(|(s, &b)| (b, s)).collect();
        v.sort_by_key(|(b, _)| [b[2], b[1], b[0]]);
        v
    }

    /// Walks allocated voxels along `[t0, t1]` of a ray already clipped to the
    /// grid, calling `f(slot, s_entry, s_exit)`.
    #[inline]
    pub(crate) fn walk_allocated(
        &self,
        geometry: &GridGeometry,
        ray: &Ray,
        t0: f64,
        t1: f64,
        mut f: impl FnMut(usize, f64, f64),
    ) {
        let b = self.brick_size as i64;
        let bd = [self.brick_dims[0] as i64, self.brick_dims[1] as i64, self.brick_dims[2] as i64];
        let vpb = self.voxels_per_brick();
        let (origin, side) = (geometry.origin, geometry.voxel_side);
        for (bc, b_in, b_out) in CellWalk::new(&ray.origin, &ray.direction, &origin, side, b, [0; 3], bd, t0, t1) {
            let Some(pool) = self.pool_of_linear(self.brick_linear([bc[0] as u32, bc[1] as u32, bc[2] as u32])) else {
                continue;
            };
            let lo = [bc[0] * b, bc[1] * b, bc[2] * b];
            let hi = [lo[0] + b, lo[1] + b, lo[2] + b];
            for (vc, s_in, s_out) in CellWalk::new(&ray.origin, &ray.direction, &origin, side, 1, lo, hi, b_in, b_out) {
                let l = [vc[0] - lo[0], vc[1] - lo[1], vc[2] - lo[2]];
                f(pool * vpb + ((l[2] * b + l[1]) * b + l[0]) as usize, s_in, s_out);
            }
        }
    }

    /// Linear indices of every brick the ray crosses over `[t0, t1]`.
    pub(crate) fn bricks_along(&self, geometry: &GridGeometry, ray: &Ray, t0: f64, t1: f64, out: &mut Vec<u32>) {
        let b = self.brick_size as i64;
        let bd = [self.brick_dims[0] as i64, self.brick_dims[1] as i64, self.brick_dims[2] as i64];
        for (bc, _, _) in
            CellWalk::new(&ray.origin, &ray.direction, &geometry.origin, geometry.voxel_side, b, [0; 3], bd, t0, t1)
        {
            out.push(self.brick_linear([bc[0] as u32, bc[1] as u32, bc[2] as u32]) as u32);
        }
    }
}

#[derive(Debug)]
pub struct SparseGrid {
    config: GridConfig,
    geometry: GridGeometry,
    topology: BrickTopology,
    beliefs: Vec<VoxelBelief>,
    keyframes: Vec<KeyframeBuffer>,
    prior: f64,
    message_floor: f64,
    out_of_bounds_points: u64,
}

impl SparseGrid {
    pub fn new(config: GridConfig, prior: f64) -> Result<Self, GridError> {
        config.validate()?;
        if !(prior > 0.0 && prior < 1.0) {
            return Err(GridError::InvalidConfig(format!("prior {prior} outside (0, 1)")));
        }
        Ok(Self {
            config,
            geometry: config.geometry(),
            topology: BrickTopology::new(&config),
            beliefs: Vec::new(),
            keyframes: Vec::new(),
            prior,
            message_floor: DEFAULT_MESSAGE_FLOOR,
            out_of_bounds_points: 0,
        })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn grid_geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn topology(&self) -> &BrickTopology {
        &self.topology
    }

    pub fn prior(&self) -> f64 {
        self.prior
    }

    pub fn message_floor(&self) -> f64 {
        self.message_floor
    }

    pub fn set_message_floor(&mut self, floor: f64) {
        self.message_floor = floor;
    }

    pub fn allocated_bricks(&self) -> usize {
        self.topology.brick_count()
    }

    pub fn allocated_voxels(&self) -> usize {
        self.beliefs.len()
    }

    pub fn out_of_bounds_points(&self) -> u64 {
        self.out_of_bounds_points
    }

    /// Bytes of per-voxel state plus topology.
    pub fn storage_bytes(&self) -> usize {
        let per_voxel = std::mem::size_of::<VoxelBelief>()
            + self.keyframes.len() * (std::mem::size_of::<Accumulator>() + std::mem::size_of::<[f64; 2]>());
        self.topology.table_bytes() + self.beliefs.len() * per_voxel
    }

    pub fn is_brick_allocated(&self, brick: [u32; 3]) -> bool {
        self.topology.is_allocated(brick)
    }

    /// Allocates one brick; returns `true` if it was new.
    pub fn allocate_brick(&mut self, brick: [u32; 3]) -> Result<bool, GridError> {
        if self.topology.allocate(brick)?.is_none() {
            return Ok(false);
        }
        let slots = self.topology.slot_count();
        self.beliefs.resize(slots, VoxelBelief { prior: self.prior, p_occ: self.prior });
        for kf in &mut self.keyframes {
            kf.grow(slots);
        }
        Ok(true)
    }

    /// Allocates the brick containing `voxel`.
    pub fn allocate_voxel(&mut self, voxel: VoxelIndex) -> Result<bool, GridError> {
        if !self.topology.voxel_in_bounds(voxel) {
            return Err(GridError::OutOfBounds(voxel.0));
        }
        let b = self.config.brick_size;
        self.allocate_brick([voxel.0[0] / b, voxel.0[1] / b, voxel.0[2] / b])
    }

    /// Pool slot of a voxel if its brick is allocated.
    #[inline]
    pub fn slot_of(&self, voxel: VoxelIndex) -> Option<usize> {
        self.topology.slot_of(voxel)
    }

    pub fn voxel_of_slot(&self, slot: usize) -> VoxelIndex {
        self.topology.voxel_of_slot(slot)
    }

    fn require_slot(&self, voxel: VoxelIndex) -> Result<usize, GridError> {
        if !self.topology.voxel_in_bounds(voxel) {
            return Err(GridError::OutOfBounds(voxel.0));
        }
        self.slot_of(voxel).ok_or(GridError::UnallocatedVoxel(voxel.0))
    }

    pub fn belief(&self, voxel: VoxelIndex) -> Result<VoxelBelief, GridError> {
        Ok(self.beliefs[self.require_slot(voxel)?])
    }

    pub fn belief_of_slot(&self, slot: usize) -> VoxelBelief {
        self.beliefs[slot]
    }

    /// Whether any keyframe's rays crossed the slot in the latest pass.
    pub fn observed_slot(&self, slot: usize) -> bool {
        self.keyframes.iter().any(|k| slot < k.slots() && k.ray_count(slot) > 0)
    }

    pub fn set_prior(&mut self, voxel: VoxelIndex, prior: f64) -> Result<(), GridError> {
        if !(prior > 0.0 && prior < 1.0) {
            return Err(GridError::InvalidConfig(format!("prior {prior} outside (0, 1)")));
        }
        let s = self.require_slot(voxel)?;
        self.beliefs[s].prior = prior;
        Ok(())
    }

    /// Adds an empty buffer for a keyframe and returns its index.
    pub fn add_keyframe_buffer(&mut self, keyframe_id: u32) -> usize {
        self.keyframes.push(KeyframeBuffer::new(keyframe_id, self.beliefs.len()));
        self.keyframes.len() - 1
    }

    pub fn keyframe_count(&self) -> usize {
        self.keyframes.len()
    }

    pub fn keyframe_buffer(&self, k: usize) -> Result<&KeyframeBuffer, GridError> {
        self.keyframes.get(k).ok_or(GridError::UnknownKeyframe(k))
    }

    pub fn keyframe_buffer_mut(&mut self, k: usize) -> Result<&mut KeyframeBuffer, GridError> {
        self.keyframes.get_mut(k).ok_or(GridError::UnknownKeyframe(k))
    }

    /// Adds `msg` (normalized first) to keyframe `k`'s average for `voxel`.
    pub fn accumulate_outgoing(&self, k: usize, voxel: VoxelIndex, msg: MessagePair) -> Result<(), GridError> {
        let slot = self.require_slot(voxel)?;
        self.keyframe_buffer(k)?.accumulate_slot(slot, msg.normalized(), 1.0);
        Ok(())
    }

    pub fn average_message(&self, k: usize, voxel: VoxelIndex) -> Result<MessagePair, GridError> {
        let slot = self.require_slot(voxel)?;
        Ok(self.keyframe_buffer(k)?.average_slot(slot))
    }

    /// `normalize(φ ⊙ Π_{k ≠ exclude} avg_k)` for one slot, in log space.
    #[inline]
    pub fn incoming_for_slot(&self, slot: usize, exclude: Option<usize>) -> MessagePair {
        let gamma = self.beliefs[slot].prior;
        let mut l0 = (1.0 - gamma).ln();
        let mut l1 = gamma.ln();
        for (k, buf) in self.keyframes.iter().enumerate() {
            if Some(k) == exclude {
                continue;
            }
            let [a0, a1] = buf.log_average(slot, self.message_floor);
            l0 += a0;
            l1 += a1;
        }
        MessagePair::from_log(l0, l1)
    }

    pub fn incoming_product(&self, voxel: VoxelIndex, exclude: Option<usize>) -> Result<MessagePair, GridError> {
        if let Some(k) = exclude {
            self.keyframe_buffer(k)?;
        }
        Ok(self.incoming_for_slot(self.require_slot(voxel)?, exclude))
    }

    /// Incoming messages for every slot, excluding keyframe `exclude`.
    pub fn incoming_all(&self, exclude: Option<usize>) -> Vec<MessagePair> {
        (0..self.beliefs.len()).into_par_iter().map(|s| self.incoming_for_slot(s, exclude)).collect()
    }

    /// Posterior occupancy from all keyframe buffers.
    pub fn marginal(&self, voxel: VoxelIndex) -> Result<f64, GridError> {
        Ok(self.incoming_for_slot(self.require_slot(voxel)?, None).m1)
    }

    /// Stored marginal if allocated, otherwise the grid prior.
    pub fn probability_or_prior(&self, voxel: VoxelIndex) -> f64 {
        self.slot_of(voxel).map_or(self.prior, |s| self.beliefs[s].p_occ)
    }

    /// Recomputes and stores every marginal.
    pub fn update_marginals(&mut self) {
        let p: Vec<f64> = (0..self.beliefs.len()).into_par_iter().map(|s| self.incoming_for_slot(s, None).m1).collect();
        for (b, p) in self.beliefs.iter_mut().zip(p) {
            b.p_occ = p;
        }
    }

    /// Allocated voxels with stored `p_occ >= threshold`, in ascending
    /// `(z, y, x)` order.
    pub fn export_occupied(&self, threshold: f64) -> Vec<OccupiedVoxel> {
        let mut out: Vec<OccupiedVoxel> = self
            .beliefs
            .iter()
            .enumerate()
            .filter(|(_, b)| b.p_occ >= threshold)
            .map(|(s, b)| {
                let voxel = self.voxel_of_slot(s);
                let c = self.geometry.voxel_center(voxel);
                OccupiedVoxel { voxel, center: [c.x, c.y, c.z], p_occ: b.p_occ }
            })
            .collect();
        out.sort_by_key(|o| [o.voxel.0[2], o.voxel.0[1], o.voxel.0[0]]);
        out
    }

    /// Crossings of allocated voxels along `[0, s_max]`, skipping whole
    /// unallocated bricks. `out` is cleared first.
    pub fn traverse_allocated(&self, ray: &Ray, s_max: f64, out: &mut Vec<SparseStep>) -> Result<(), GeometryError> {
        out.clear();
        let (t0, t1) = self.geometry.clip_ray(&ray.origin, &ray.direction).ok_or(GeometryError::EmptyTraversal)?;
        let t0 = t0.max(0.0);
        let t1 = t1.min(s_max);
        if !(t1 > t0) {
            return Err(GeometryError::EmptyTraversal);
        }
        self.topology.walk_allocated(&self.geometry, ray, t0, t1, |slot, s_entry, s_exit| {
            out.push(SparseStep { slot: slot as u32, s_entry, s_exit })
        });
        Ok(())
    }

    /// Bricks that must exist for one depth image: an axis-aligned cube of
    /// half-side `3σ_max` around each reprojected point, and the bricks along
    /// the ray between the bias-corrected depth and the measured depth,
    /// padded by the same radius.
    pub fn bricks_for_depth_image(
        &self,
        intr: &CameraIntrinsics,
        pose: &Pose,
        depth: &DepthImage,
        model: &SensorNoiseModel,
        sigma_cutoff: f64,
    ) -> (Vec<u32>, AllocationStats) {
        let bd = self.topology.brick_dims();
        let brick_side = self.geometry.voxel_side * self.config.brick_size as f64;
        let origin = self.geometry.origin;
        let per_row: Vec<(Vec<u32>, usize, usize)> = (0..depth.height())
            .into_par_iter()
            .map(|v| {
                let mut set = Vec::new();
                let (mut valid, mut oob) = (0usize, 0usize);
                for u in 0..depth.width() {
                    let raw = depth.raw(u, v);
                    if raw == 0 {
                        continue;
                    }
                    let Ok(ray) = pixel_to_ray(intr, pose, u, v, raw as f64) else { continue };
                    valid += 1;
                    let z = ray.measured_depth;
                    let p = ray.at(z);
                    if self.geometry.voxel_of(&p).is_none() {
                        oob += 1;
                        continue;
                    }
                    let r = sigma_cutoff * model.sigma_max(z);
                    let mut lo = [0u32; 3];
                    let mut hi = [0u32; 3];
                    for k in 0..3 {
                        let cell = |x: f64| ((x - origin[k]) / brick_side).floor().clamp(0.0, (bd[k] - 1) as f64) as u32;
                        lo[k] = cell(p[k] - r);
                        hi[k] = cell(p[k] + r);
                    }
                    for bz in lo[2]..=hi[2] {
                        for by in lo[1]..=hi[1] {
                            for bx in lo[0]..=hi[0] {
                                set.push(self.topology.brick_linear([bx, by, bz]) as u32);
                            }
                        }
                    }
                    let d_corr = model.invert_predicted(u, v, z);
                    let s0 = (z.min(d_corr) - r).max(0.0);
                    let s1 = z + r;
                    if let Some((t0, t1)) = self.geometry.clip_ray(&ray.origin, &ray.direction) {
                        let (a, c) = (s0.max(t0), s1.min(t1));
                        if c > a {
                            self.topology.bricks_along(&self.geometry, &ray, a, c, &mut set);
                        }
                    }
                }
                set.sort_unstable();
                set.dedup();
                (set, valid, oob)
            })
            .collect();
        let mut stats = AllocationStats::default();
        let mut all = Vec::new();
        for (set, valid, oob) in per_row {
            all.extend(set);
            stats.valid_points += valid;
            stats.out_of_bounds_points += oob;
        }
        all.sort_unstable();
        all.dedup();
        (all, stats)
    }

    /// Allocates bricks around the reprojected points of one depth image.
    pub fn allocate_for_depth_image(
        &mut self,
        intr: &CameraIntrinsics,
        pose: &Pose,
        depth: &DepthImage,
        model: &SensorNoiseModel,
        sigma_cutoff: f64,
    ) -> AllocationStats {
        let (bricks, mut stats) = self.bricks_for_depth_image(intr, pose, depth, model, sigma_cutoff);
        for lin in bricks {
            let brick = self.topology.brick_of_linear(lin as usize);
            if self.allocate_brick(brick).unwrap_or(false) {
                stats.new_bricks += 1;
            }
        }
        self.out_of_bounds_points += stats.out_of_bounds_points as u64;
        stats
    }

    pub(crate) fn keyframes_mut(&mut self) -> &mut [KeyframeBuffer] {
        &mut self.keyframes
    }

    #[cfg(test)]
    pub(crate) fn beliefs_mut(&mut self) -> &mut [VoxelBelief] {
        &mut self.beliefs
    }
}

impl OccupancyField for SparseGrid {
    fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    fn occupancy(&self, voxel: VoxelIndex) -> Option<f64> {
        self.slot_of(voxel).filter(|&s| self.observed_slot(s)).map(|s| self.beliefs[s].p_occ)
    }

    fn unknown_probability(&self) -> f64 {
        self.prior
    }
}
