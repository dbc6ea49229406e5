//! Probabilistic occupancy mapping with per-ray Markov random fields.
//!
//! Posed depth images are turned into ray factors over a brick-sparse voxel
//! grid and solved with loopy sum-product belief propagation. Maps of any
//! kind can be scored with a visibility-aware generating-surface metric.

pub mod baseline_logodds;
pub mod dataset_io;
pub mod geometry;
pub mod map_eval;
pub mod map_io;
pub mod pipeline;
pub mod ray_mrf;
pub mod sensor_model;
pub mod sparse_grid;

pub use dataset_io::{DepthImage, Keyframe, KeyframePolicy, SyntheticScene};
pub use baseline_logodds::{LogOddsConfig, LogOddsMap};
pub use geometry::{CameraIntrinsics, Pose, Ray, RayTraversal, TraversalStep, Vec3, VoxelIndex};
pub use map_io::{MapType, ProbabilityMap};
pub use pipeline::{BuildLog, MapBuilder, Method};
pub use ray_mrf::{InferenceConfig, MrfMap};
pub use sensor_model::{NoisePolynomial, SensorNoiseModel};
pub use sparse_grid::{GridConfig, MessagePair, OccupancyField, SparseGrid};
