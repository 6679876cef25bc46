//! Deterministic stand-in for the sensing side of the system: scenes,
//! camera walks and a noisy local predictor.

pub mod predictor;
pub mod scene;
pub mod trajectory;

pub use predictor::{noisy_local, oracle_local, LocalVolumes, NoiseConfig, FEATURE_DIM};
pub use scene::{classes, generate_scene, RoomConfig, Scene};
pub use trajectory::{generate_trajectory, priors_from_poses, TrajectoryConfig};
