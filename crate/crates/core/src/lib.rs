//! Incremental semantic occupancy mapping.
//!
//! Per-frame local volumes (class logits plus features over a camera-aligned
//! grid) are fused into a sparse, unbounded global map. Three stages run per
//! frame: temporal aggregation of overlapping voxels with a small MLP,
//! geometric confidence from depth and image-border proximity, and a
//! confidence-weighted recursive state update. A deterministic simulator
//! provides scenes, trajectories and noisy local predictions.

pub mod commands;
pub mod config;
pub mod csu;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod rcm;
pub mod sim;
pub mod tla;

pub use csu::{FusionStrategy, SparseGlobalMap, VoxelState};
pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, CameraPose, GeometricPrior, Vec3, VoxelCoord};
pub use metrics::{EvalReport, MaskMode};
pub use pipeline::{Pipeline, PipelineConfig};
pub use rcm::RcmParams;
pub use tla::MlpWeights;
