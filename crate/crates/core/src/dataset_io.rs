//! Depth images, trajectories, keyframe selection, and an analytic scene
//! renderer.
//!
//! A dataset directory holds:
//!
//! ```text
//! intrinsics.json   {fx, fy, cx, cy, width, height, depth_scale}
//! trajectory.txt    TUM format: t tx ty tz qx qy qz qw
//! depth.txt         "timestamp relative/path.png" per line
//! depth_gt.txt      optional, same layout, noiseless images
//! volume.json       optional, {min: [x, y, z], max: [x, y, z]}
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, GeometryError, Pose, Vec3};

/// Chord length below which a ray is treated as grazing a box.
const GRAZE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}:{line}: timestamps are not strictly increasing")]
    NonMonotonicTimestamps { path: String, line: usize },
    #[error("{path}: {msg}")]
    Decode { path: String, msg: String },
    #[error("{path}: image is {got:?}, expected {expected:?}")]
    DimensionMismatch { path: String, got: (u32, u32), expected: (u32, u32) },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

/// Row-major 16-bit depth image; raw `0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: u32,
    height: u32,
    depth_scale: f64,
    data: Vec<u16>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, depth_scale: f64, data: Vec<u16>) -> Result<Self, DatasetError> {
        if data.len() != width as usize * height as usize {
            return Err(DatasetError::Invalid(format!(
                "{} samples for a {width}x{height} image",
                data.len()
            )));
        }
        if !(depth_scale > 0.0) {
            return Err(DatasetError::Invalid(format!("depth scale {depth_scale}")));
        }
        Ok(Self { width, height, depth_scale, data })
    }

    pub fn empty(width: u32, height: u32, depth_scale: f64) -> Self {
        Self { width, height, depth_scale, data: vec![0; width as usize * height as usize] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn depth_scale(&self) -> f64 {
        self.depth_scale
    }

    #[inline]
    pub fn raw(&self, u: u32, v: u32) -> u16 {
        self.data[v as usize * self.width as usize + u as usize]
    }

    #[inline]
    pub fn set_raw(&mut self, u: u32, v: u32, raw: u16) {
        self.data[v as usize * self.width as usize + u as usize] = raw;
    }

    /// Z-depth in meters, `None` if invalid.
    pub fn depth(&self, u: u32, v: u32) -> Option<f64> {
        match self.raw(u, v) {
            0 => None,
            r => Some(r as f64 / self.depth_scale),
        }
    }

    pub fn raw_data(&self) -> &[u16] {
        &self.data
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&r| r != 0).count()
    }

    pub fn save_png(&self, path: &Path) -> Result<(), DatasetError> {
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width, self.height, self.data.clone()).expect("buffer size checked");
        img.save(path).map_err(|e| DatasetError::Decode { path: path.display().to_string(), msg: e.to_string() })
    }

    /// Reads a 16-bit single-channel PNG and checks it against `intr`.
    pub fn load_png(path: &Path, intr: &CameraIntrinsics) -> Result<Self, DatasetError> {
        let p = path.display().to_string();
        let dynimg = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(source) => DatasetError::Io { path: p.clone(), source },
            e => DatasetError::Decode { path: p.clone(), msg: e.to_string() },
        })?;
        let img = match dynimg {
            image::DynamicImage::ImageLuma16(img) => img,
            other => {
                return Err(DatasetError::Decode {
                    path: p,
                    msg: format!("expected 16-bit grayscale, found {:?}", other.color()),
                })
            }
        };
        let got = img.dimensions();
        if got != (intr.width, intr.height) {
            return Err(DatasetError::DimensionMismatch { path: p, got, expected: (intr.width, intr.height) });
        }
        Self::new(got.0, got.1, intr.depth_scale, img.into_raw())
    }
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let intr: CameraIntrinsics =
        serde_json::from_str(&text).map_err(|source| DatasetError::Json { path: path.display().to_string(), source })?;
    intr.validate()?;
    Ok(intr)
}

pub fn save_intrinsics(path: &Path, intr: &CameraIntrinsics) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(intr).expect("intrinsics serialize");
    std::fs::write(path, text).map_err(io_err(path))
}

/// A timestamped pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

/// Parses a TUM trajectory (`t tx ty tz qx qy qz qw`, `#` comments).
pub fn parse_trajectory(text: &str, source: &str) -> Result<Vec<StampedPose>, DatasetError> {
    let mut out: Vec<StampedPose> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| DatasetError::Parse { path: source.to_string(), line: line_no, msg };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| parse_err(format!("'{t}': {e}"))))
            .collect::<Result<_, _>>()?;
        if vals.len() != 8 {
            return Err(parse_err(format!("expected 8 fields, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("non-finite value".into()));
        }
        let pose = Pose::from_quaternion(Vec3::new(vals[1], vals[2], vals[3]), [vals[4], vals[5], vals[6], vals[7]])
            .map_err(|e| parse_err(e.to_string()))?;
        if let Some(last) = out.last() {
            if vals[0] <= last.timestamp {
                return Err(DatasetError::NonMonotonicTimestamps { path: source.to_string(), line: line_no });
            }
        }
        out.push(StampedPose { timestamp: vals[0], pose });
    }
    Ok(out)
}

pub fn load_trajectory(path: &Path) -> Result<Vec<StampedPose>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_trajectory(&text, &path.display().to_string())
}

pub fn format_trajectory(poses: &[StampedPose]) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for p in poses {
        let t = p.pose.translation();
        let q = p.pose.quaternion();
        writeln!(
            s,
            "{:.6} {:e} {:e} {:e} {:e} {:e} {:e} {:e}",
            p.timestamp, t.x, t.y, t.z, q[0], q[1], q[2], q[3]
        )
        .unwrap();
    }
    s
}

pub fn save_trajectory(path: &Path, poses: &[StampedPose]) -> Result<(), DatasetError> {
    std::fs::write(path, format_trajectory(poses)).map_err(io_err(path))
}

/// Reads a `timestamp path` list; paths are resolved against the list's directory.
pub fn load_image_list(path: &Path) -> Result<Vec<(f64, PathBuf)>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| DatasetError::Parse { path: path.display().to_string(), line: i + 1, msg };
        let mut it = line.split_whitespace();
        let (Some(t), Some(p), None) = (it.next(), it.next(), it.next()) else {
            return Err(err("expected 'timestamp path'".into()));
        };
        let t: f64 = t.parse().map_err(|e| err(format!("'{t}': {e}")))?;
        out.push((t, base.join(p)));
    }
    Ok(out)
}

pub fn save_image_list(path: &Path, entries: &[(f64, String)]) -> Result<(), DatasetError> {
    let mut s = String::from("# timestamp filename\n");
    for (t, p) in entries {
        writeln!(s, "{t:.6} {p}").unwrap();
    }
    std::fs::write(path, s).map_err(io_err(path))
}

/// Index of the pose nearest in time to `t`, if within `max_gap` seconds.
pub fn associate(trajectory: &[StampedPose], t: f64, max_gap: f64) -> Option<usize> {
    let i = trajectory.partition_point(|p| p.timestamp < t);
    [i.checked_sub(1), Some(i)]
        .into_iter()
        .flatten()
        .filter(|&j| j < trajectory.len())
        .map(|j| (j, (trajectory[j].timestamp - t).abs()))
        .filter(|&(_, gap)| gap <= max_gap)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(j, _)| j)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyframePolicy {
    /// Translation threshold (meters).
    pub tau_trans: f64,
    /// Geodesic rotation threshold (radians).
    pub tau_rot: f64,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self { tau_trans: 1.0, tau_rot: 1.0 }
    }
}

/// Indices of frames displaced by more than the policy thresholds from the
/// previous selection. The first frame is always selected.
pub fn select_keyframes(poses: &[Pose], policy: &KeyframePolicy) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for (i, p) in poses.iter().enumerate() {
        let keep = match out.last() {
            None => true,
            Some(&j) => {
                p.translation_distance_to(&poses[j]) > policy.tau_trans || p.rotation_angle_to(&poses[j]) > policy.tau_rot
            }
        };
        if keep {
            out.push(i);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: u32,
    pub timestamp: f64,
    pub pose: Pose,
    pub depth: DepthImage,
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Plane through `point` with normal `normal`; with `extent`, a square of
/// half-side `extent` centred on `point`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenePlane {
    pub point: [f64; 3],
    pub normal: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Camera given as a world-from-camera pose or as a look-at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CameraSpec {
    Pose {
        translation: [f64; 3],
        /// Row-major 3x3.
        rotation: [[f64; 3]; 3],
    },
    LookAt {
        eye: [f64; 3],
        target: [f64; 3],
        #[serde(default = "default_up")]
        up: [f64; 3],
    },
}

fn default_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

impl CameraSpec {
    pub fn pose(&self) -> Result<Pose, GeometryError> {
        match *self {
            CameraSpec::Pose { translation, rotation } => {
                let r = crate::geometry::Mat3::from_row_slice(&rotation.concat());
                Pose::new(r, Vec3::from(translation))
            }
            CameraSpec::LookAt { eye, target, up } => Pose::look_at(Vec3::from(eye), Vec3::from(target), Vec3::from(up)),
        }
    }

    pub fn from_pose(pose: &Pose) -> Self {
        let r = pose.rotation();
        let t = pose.translation();
        CameraSpec::Pose {
            translation: [t.x, t.y, t.z],
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    #[serde(default)]
    pub boxes: Vec<SceneBox>,
    #[serde(default)]
    pub planes: Vec<ScenePlane>,
    #[serde(default)]
    pub cameras: Vec<CameraSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume: Option<Volume>,
}

impl SyntheticScene {
    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let scene: Self =
            serde_json::from_str(text).map_err(|source| DatasetError::Json { path: "<scene>".into(), source })?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let scene: Self = serde_json::from_str(&text)
            .map_err(|source| DatasetError::Json { path: path.display().to_string(), source })?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        for (i, b) in self.boxes.iter().enumerate() {
            if b.min.iter().chain(&b.max).any(|c| !c.is_finite()) || (0..3).any(|k| b.max[k] <= b.min[k]) {
                return Err(DatasetError::InvalidScene(format!("box {i} is empty or not finite")));
            }
        }
        for (i, p) in self.planes.iter().enumerate() {
            let n = Vec3::from(p.normal);
            if p.point.iter().any(|c| !c.is_finite()) || !(n.norm() > 1e-12) {
                return Err(DatasetError::InvalidScene(format!("plane {i} has a bad point or normal")));
            }
            if p.extent.is_some_and(|e| !(e > 0.0)) {
                return Err(DatasetError::InvalidScene(format!("plane {i} has a non-positive extent")));
            }
        }
        if let Some(v) = &self.volume {
            if (0..3).any(|k| !(v.max[k] > v.min[k])) {
                return Err(DatasetError::InvalidScene("volume is empty".into()));
            }
        }
        for (i, c) in self.cameras.iter().enumerate() {
            c.pose().map_err(|e| DatasetError::InvalidScene(format!("camera {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty() && self.planes.is_empty()
    }

    /// Nearest positive hit distance; rays grazing a box edge miss it.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let mut best = f64::INFINITY;
        for b in &self.boxes {
            if let Some((t0, t1)) = crate::geometry::clip_to_box(origin, dir, &Vec3::from(b.min), &Vec3::from(b.max)) {
                if t1 - t0 <= GRAZE_TOLERANCE {
                    continue;
                }
                let t = if t0 > 0.0 { t0 } else { t1 };
                if t > 0.0 && t < best {
                    best = t;
                }
            }
        }
        for p in &self.planes {
            let n = Vec3::from(p.normal).normalize();
            let denom = n.dot(dir);
            if denom.abs() < 1e-15 {
                continue;
            }
            let pt = Vec3::from(p.point);
            let t = n.dot(&(pt - origin)) / denom;
            if !(t > 0.0 && t < best) {
                continue;
            }
            if let Some(e) = p.extent {
                let (e1, e2) = plane_basis(&n);
                let q = origin + dir * t - pt;
                if q.dot(&e1).abs().max(q.dot(&e2).abs()) > e {
                    continue;
                }
            }
            best = t;
        }
        best.is_finite().then_some(best)
    }
}

/// In-plane orthonormal axes; axis aligned when the normal is.
pub fn plane_basis(n: &Vec3) -> (Vec3, Vec3) {
    let a = n.iamin();
    let mut axis = Vec3::zeros();
    axis[a] = 1.0;
    let e1 = n.cross(&axis).normalize();
    (e1, n.cross(&e1))
}

/// Ground-truth z-depth image of `scene`; pixels with no hit, or whose depth
/// does not fit in 16 bits, are invalid.
pub fn render_synthetic_depth(scene: &SyntheticScene, intr: &CameraIntrinsics, pose: &Pose) -> DepthImage {
    let w = intr.width as usize;
    let mut data = vec![0u16; w * intr.height as usize];
    data.par_chunks_mut(w).enumerate().for_each(|(v, row)| {
        for (u, px) in row.iter_mut().enumerate() {
            let bearing = intr.bearing(u as f64, v as f64);
            let norm = bearing.norm();
            let dir = pose.rotation() * (bearing / norm);
            if let Some(range) = scene.intersect(pose.translation(), &dir) {
                let raw = (range / norm * intr.depth_scale).round();
                if raw >= 1.0 && raw <= u16::MAX as f64 {
                    *px = raw as u16;
                }
            }
        }
    });
    DepthImage { width: intr.width, height: intr.height, depth_scale: intr.depth_scale, data }
}

pub fn load_volume(path: &Path) -> Result<Volume, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Json { path: path.display().to_string(), source })
}

/// One depth frame with its associated pose.
#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp: f64,
    pub pose: Pose,
    pub depth_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Frame>,
    /// Ground-truth frames, when `depth_gt.txt` is present.
    pub gt_frames: Option<Vec<Frame>>,
    pub volume: Option<Volume>,
    /// Images with no pose within the association gap.
    pub unassociated: usize,
}

impl Dataset {
    pub fn load(root: &Path, max_gap: f64) -> Result<Self, DatasetError> {
        let intrinsics = load_intrinsics(&root.join("intrinsics.json"))?;
        let trajectory = load_trajectory(&root.join("trajectory.txt"))?;
        let mut unassociated = 0;
        let mut frames_from = |list: &Path| -> Result<Vec<Frame>, DatasetError> {
            let mut frames = Vec::new();
            for (t, p) in load_image_list(list)? {
                match associate(&trajectory, t, max_gap) {
                    Some(j) => frames.push(Frame { timestamp: t, pose: trajectory[j].pose, depth_path: p }),
                    None => unassociated += 1,
                }
            }
            Ok(frames)
        };
        let frames = frames_from(&root.join("depth.txt"))?;
        let gt_list = root.join("depth_gt.txt");
        let gt_frames = if gt_list.exists() { Some(frames_from(&gt_list)?) } else { None };
        let vol = root.join("volume.json");
        let volume = if vol.exists() { Some(load_volume(&vol)?) } else { None };
        Ok(Self { root: root.to_path_buf(), intrinsics, frames, gt_frames, volume, unassociated })
    }

    pub fn load_depth(&self, frame: &Frame) -> Result<DepthImage, DatasetError> {
        DepthImage::load_png(&frame.depth_path, &self.intrinsics)
    }

    /// Keyframes chosen by `policy`, with images loaded.
    pub fn keyframes(&self, policy: &KeyframePolicy) -> Result<Vec<Keyframe>, DatasetError> {
        let poses: Vec<Pose> = self.frames.iter().map(|f| f.pose).collect();
        select_keyframes(&poses, policy)
            .into_iter()
            .map(|i| {
                let f = &self.frames[i];
                Ok(Keyframe { id: i as u32, timestamp: f.timestamp, pose: f.pose, depth: self.load_depth(f)? })
            })
            .collect()
    }
}
