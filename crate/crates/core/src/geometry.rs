//! Pinhole cameras, rigid poses, ray generation and exact voxel traversal.
//!
//! Conventions: camera frame is x right, y down, z forward. A [`Pose`] maps
//! camera coordinates into world coordinates. Depth images store z-depth;
//! rays carry range along the unit direction.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Direction components with a smaller magnitude never cross a boundary.
pub const DEGENERATE_DIRECTION: f64 = 1e-12;
const END_SNAP: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal with determinant +1 (error {0:.3e})")]
    InvalidRotation(f64),
    #[error("invalid depth at pixel ({u}, {v})")]
    InvalidDepth { u: u32, v: u32 },
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfBounds { u: u32, v: u32, width: u32, height: u32 },
    #[error("ray segment misses the grid volume")]
    EmptyTraversal,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Raw depth units per meter.
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        depth_scale: f64,
    ) -> Result<Self, GeometryError> {
        let intr = Self { fx, fy, cx, cy, width, height, depth_scale };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return bad("cx must lie strictly inside the image");
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return bad("cy must lie strictly inside the image");
        }
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return bad("depth_scale must be positive");
        }
        Ok(())
    }

    /// Unnormalized camera-frame bearing `[(u-cx)/fx, (v-cy)/fy, 1]`.
    #[inline]
    pub fn bearing(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame point; `None` behind the camera.
    pub fn project(&self, p_cam: &Vec3) -> Option<(f64, f64)> {
        if p_cam.z <= 0.0 {
            return None;
        }
        Some((self.fx * p_cam.x / p_cam.z + self.cx, self.fy * p_cam.y / p_cam.z + self.cy))
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Rigid world-from-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub const ORTHONORMAL_TOLERANCE: f64 = 1e-9;

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let err = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        let det_err = (rotation.determinant() - 1.0).abs();
        let worst = err.max(det_err);
        if !(worst <= Self::ORTHONORMAL_TOLERANCE) {
            return Err(GeometryError::InvalidRotation(worst));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self { rotation: Mat3::identity(), translation }
    }

    /// Quaternion in `(x, y, z, w)` order; it is normalized before use.
    pub fn from_quaternion(translation: Vec3, q: [f64; 4]) -> Result<Self, GeometryError> {
        let quat = nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]);
        let norm = quat.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(GeometryError::InvalidRotation(f64::NAN));
        }
        let unit = UnitQuaternion::from_quaternion(quat);
        Ok(Self { rotation: *unit.to_rotation_matrix().matrix(), translation })
    }

    /// Quaternion `(x, y, z, w)` with non-negative `w`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.i, s * q.j, s * q.k, s * q.w]
    }

    /// Camera at `eye` looking at `target`, with image "up" towards `up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self, GeometryError> {
        let z = (target - eye).try_normalize(1e-12).ok_or(GeometryError::InvalidRotation(0.0))?;
        let x = z.cross(&up).try_normalize(1e-12).ok_or(GeometryError::InvalidRotation(0.0))?;
        let y = z.cross(&x);
        let rotation = Mat3::from_columns(&[x, y, z]);
        Self::new(rotation, eye)
    }

    #[inline]
    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    #[inline]
    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    #[inline]
    pub fn transform_point(&self, p_cam: &Vec3) -> Vec3 {
        self.rotation * p_cam + self.translation
    }

    #[inline]
    pub fn inverse_transform_point(&self, p_world: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p_world - self.translation)
    }

    /// Geodesic angle (radians) of the relative rotation `self^T * other`.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub direction: Vec3,
    pub pixel: (u32, u32),
    /// Measured range along `direction` (meters).
    pub measured_depth: f64,
}

impl Ray {
    #[inline]
    pub fn at(&self, s: f64) -> Vec3 {
        self.origin + self.direction * s
    }
}

/// Back-projects a pixel with its raw z-depth into a world-frame ray.
pub fn pixel_to_ray(
    intr: &CameraIntrinsics,
    pose: &Pose,
    u: u32,
    v: u32,
    raw_depth: f64,
) -> Result<Ray, GeometryError> {
    if u >= intr.width || v >= intr.height {
        return Err(GeometryError::PixelOutOfBounds { u, v, width: intr.width, height: intr.height });
    }
    if !(raw_depth.is_finite() && raw_depth > 0.0) {
        return Err(GeometryError::InvalidDepth { u, v });
    }
    let bearing = intr.bearing(u as f64, v as f64);
    let norm = bearing.norm();
    let z = raw_depth / intr.depth_scale;
    Ok(Ray {
        origin: *pose.translation(),
        direction: pose.rotation() * (bearing / norm),
        pixel: (u, v),
        measured_depth: z * norm,
    })
}

/// Integer voxel coordinates within a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelIndex(pub [u32; 3]);

/// Regular voxel lattice: `origin` is the minimum corner of voxel `[0, 0, 0]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub origin: Vec3,
    pub voxel_side: f64,
    pub dims: [u32; 3],
}

impl GridGeometry {
    pub fn new(origin: Vec3, voxel_side: f64, dims: [u32; 3]) -> Result<Self, GeometryError> {
        if !(voxel_side > 0.0 && voxel_side.is_finite()) {
            return Err(GeometryError::InvalidGrid("voxel side must be positive".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(GeometryError::InvalidGrid("grid dimensions must be non-zero".into()));
        }
        Ok(Self { origin, voxel_side, dims })
    }

    pub fn min_corner(&self) -> Vec3 {
        self.origin
    }

    pub fn max_corner(&self) -> Vec3 {
        self.origin
            + Vec3::new(
                self.dims[0] as f64 * self.voxel_side,
                self.dims[1] as f64 * self.voxel_side,
                self.dims[2] as f64 * self.voxel_side,
            )
    }

    pub fn voxel_count(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }

    pub fn contains(&self, v: [i64; 3]) -> bool {
        (0..3).all(|k| v[k] >= 0 && v[k] < self.dims[k] as i64)
    }

    /// Voxel containing `p` under half-open `[lo, hi)` cells.
    pub fn voxel_of(&self, p: &Vec3) -> Option<VoxelIndex> {
        let mut idx = [0u32; 3];
        for k in 0..3 {
            let q = ((p[k] - self.origin[k]) / self.voxel_side).floor();
            if !(q >= 0.0 && q < self.dims[k] as f64) {
                return None;
            }
            idx[k] = q as u32;
        }
        Some(VoxelIndex(idx))
    }

    pub fn voxel_center(&self, v: VoxelIndex) -> Vec3 {
        let h = 0.5 * self.voxel_side;
        Vec3::new(
            self.origin.x + v.0[0] as f64 * self.voxel_side + h,
            self.origin.y + v.0[1] as f64 * self.voxel_side + h,
            self.origin.z + v.0[2] as f64 * self.voxel_side + h,
        )
    }

    pub fn linear_index(&self, v: VoxelIndex) -> u64 {
        let [x, y, z] = v.0;
        (z as u64 * self.dims[1] as u64 + y as u64) * self.dims[0] as u64 + x as u64
    }

    /// Parametric interval `[s_in, s_out]` of the ray inside the grid box.
    pub fn clip_ray(&self, origin: &Vec3, direction: &Vec3) -> Option<(f64, f64)> {
        clip_to_box(origin, direction, &self.min_corner(), &self.max_corner())
    }
}

/// Slab clip of the infinite ray against an axis-aligned box.
pub fn clip_to_box(origin: &Vec3, direction: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        let d = direction[k];
        if d.abs() < DEGENERATE_DIRECTION {
            if origin[k] < lo[k] || origin[k] > hi[k] {
                return None;
            }
            continue;
        }
        let a = (lo[k] - origin[k]) / d;
        let b = (hi[k] - origin[k]) / d;
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// One voxel crossing: the ray spends `[s_entry, s_exit]` inside `voxel`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraversalStep {
    pub voxel: VoxelIndex,
    pub s_entry: f64,
    pub s_exit: f64,
}

impl TraversalStep {
    #[inline]
    pub fn length(&self) -> f64 {
        self.s_exit - self.s_entry
    }

    /// Cell depth of this crossing: the midpoint of the traversed span.
    #[inline]
    pub fn cell_depth(&self) -> f64 {
        0.5 * (self.s_entry + self.s_exit)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayTraversal {
    pub ray: Ray,
    pub steps: Vec<TraversalStep>,
}

impl RayTraversal {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_length(&self) -> f64 {
        self.steps.iter().map(TraversalStep::length).sum()
    }
}

/// Amanatides–Woo walk over a lattice whose cells span `cell` voxels per edge.
///
/// Boundaries are evaluated as `origin + (voxel boundary index) * side`, so a
/// brick-level walk and the voxel-level walks inside it agree bit for bit on
/// shared boundaries.
#[derive(Debug, Clone)]
pub(crate) struct CellWalk {
    ray_origin: [f64; 3],
    dir: [f64; 3],
    grid_origin: [f64; 3],
    side: f64,
    cell: i64,
    lo: [i64; 3],
    hi: [i64; 3],
    cur: [i64; 3],
    step: [i64; 3],
    next: [f64; 3],
    t: f64,
    t_end: f64,
    done: bool,
}

impl CellWalk {
    /// Walks cells `lo..hi` (cell indices, exclusive upper) over `[t_start, t_end]`.
    /// The caller guarantees the interval lies inside the region.
    pub(crate) fn new(
        ray_origin: &Vec3,
        dir: &Vec3,
        grid_origin: &Vec3,
        side: f64,
        cell: i64,
        lo: [i64; 3],
        hi: [i64; 3],
        t_start: f64,
        t_end: f64,
    ) -> Self {
        let mut walk = Self {
            ray_origin: [ray_origin.x, ray_origin.y, ray_origin.z],
            dir: [dir.x, dir.y, dir.z],
            grid_origin: [grid_origin.x, grid_origin.y, grid_origin.z],
            side,
            cell,
            lo,
            hi,
            cur: [0; 3],
            step: [0; 3],
            next: [f64::INFINITY; 3],
            t: t_start,
            t_end,
            done: !(t_end > t_start),
        };
        for k in 0..3 {
            let d = walk.dir[k];
            walk.step[k] = if d.abs() < DEGENERATE_DIRECTION {
                0
            } else if d > 0.0 {
                1
            } else {
                -1
            };
            let p = walk.ray_origin[k] + d * t_start;
            let q = (p - walk.grid_origin[k]) / side / cell as f64;
            let mut idx = q.floor() as i64;
            // Half-open cells: a point on a boundary belongs to the upper cell,
            // but a ray leaving it downwards is already in the lower one.
            if walk.step[k] < 0 && q == q.floor() {
                idx -= 1;
            }
            walk.cur[k] = idx.clamp(lo[k], hi[k] - 1);
            walk.next[k] = walk.boundary_t(k);
        }
        walk
    }

    #[inline]
    fn boundary_t(&self, k: usize) -> f64 {
        let b = match self.step[k] {
            0 => return f64::INFINITY,
            1 => self.cur[k] + 1,
            _ => self.cur[k],
        };
        let pos = self.grid_origin[k] + (b * self.cell) as f64 * self.side;
        (pos - self.ray_origin[k]) / self.dir[k]
    }
}

impl Iterator for CellWalk {
    /// `(cell index, t_in, t_out)`.
    type Item = ([i64; 3], f64, f64);

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            let t_min = self.next[0].min(self.next[1]).min(self.next[2]);
            // Boundaries within rounding of the end do not open a new cell.
            let t_out = if self.t_end - t_min <= END_SNAP * self.side { self.t_end } else { t_min.min(self.t_end) };
            let cell = self.cur;
            let t_in = self.t;
            if t_out >= self.t_end {
                self.done = true;
            } else {
                // Crossings within rounding of each other are one corner or edge crossing.
                let merge = t_out + END_SNAP * self.side;
                for k in 0..3 {
                    if self.next[k] <= merge {
                        self.cur[k] += self.step[k];
                        if self.cur[k] < self.lo[k] || self.cur[k] >= self.hi[k] {
                            self.done = true;
                        }
                        self.next[k] = self.boundary_t(k);
                    }
                }
            }
            self.t = t_out;
            if t_out > t_in {
                return Some((cell, t_in, t_out));
            }
        }
        None
    }
}

/// Every voxel the segment `[0, s_max]` crosses, in order, with exact spans.
pub fn traverse_3dda(
    grid: &GridGeometry,
    ray: &Ray,
    s_max: f64,
) -> Result<RayTraversal, GeometryError> {
    let (t0, t1) = grid.clip_ray(&ray.origin, &ray.direction).ok_or(GeometryError::EmptyTraversal)?;
    let t0 = t0.max(0.0);
    let t1 = t1.min(s_max);
    if !(t1 > t0) {
        return Err(GeometryError::EmptyTraversal);
    }
    let hi = [grid.dims[0] as i64, grid.dims[1] as i64, grid.dims[2] as i64];
    let steps = CellWalk::new(
        &ray.origin,
        &ray.direction,
        &grid.origin,
        grid.voxel_side,
        1,
        [0; 3],
        hi,
        t0,
        t1,
    )
    .map(|(c, s_entry, s_exit)| TraversalStep {
        voxel: VoxelIndex([c[0] as u32, c[1] as u32, c[2] as u32]),
        s_entry,
        s_exit,
    })
    .collect();
    Ok(RayTraversal { ray: *ray, steps })
}
