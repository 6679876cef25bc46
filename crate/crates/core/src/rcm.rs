//! Training-free per-voxel confidence from viewing geometry.
//!
//! A voxel's confidence decays exponentially with its camera depth and with
//! the proximity of its projection to the image border, and is clipped to
//! `[c_min, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{boundary_proximity, project_to_image, GeometricPrior, VoxelCoord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RcmParams {
    /// Decay per meter of depth.
    pub alpha: f64,
    /// Decay at full boundary proximity.
    pub beta: f64,
    pub c_min: f64,
}

impl Default for RcmParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.5,
            c_min: 0.01,
        }
    }
}

impl RcmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("rcm.alpha and rcm.beta must be finite and >= 0"));
        }
        if !(self.c_min > 0.0 && self.c_min <= 1.0) {
            return Err(Error::invalid("rcm.c_min must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Confidence of a voxel at depth `d` (meters) with boundary proximity `b`.
pub fn confidence(d: f64, b: f64, p: &RcmParams) -> f64 {
    ((-p.alpha * d).exp() * (-p.beta * b).exp()).clamp(p.c_min, 1.0)
}

/// Confidence for every voxel of `visible`, in the same order. Voxels that
/// fail to project (not produced by `visible_voxels`) get `c_min`.
pub fn modulate_frame(visible: &[VoxelCoord], prior: &GeometricPrior, p: &RcmParams) -> Vec<f64> {
    visible
        .iter()
        .map(|c| voxel_confidence(c, prior, p))
        .collect()
}

pub fn voxel_confidence(c: &VoxelCoord, prior: &GeometricPrior, p: &RcmParams) -> f64 {
    match project_to_image(&c.center(&prior.voxel_size), prior) {
        Some(pt) => confidence(pt.depth, boundary_proximity(pt.u, pt.v, &prior.intrinsics), p),
        None => p.c_min,
    }
}
