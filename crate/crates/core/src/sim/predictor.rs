//! Synthetic local predictor: ground truth rendered into a local volume,
//! optionally corrupted by depth- and boundary-dependent noise.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{boundary_proximity, project_to_image, GeometricPrior, VoxelCoord};
use crate::sim::scene::Scene;

/// Feature channels per voxel.
pub const FEATURE_DIM: usize = 8;
/// Leading feature channels carrying the class embedding.
pub const CLASS_EMBED_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Height of the clean one-hot logit peak.
    pub logit_scale: f64,
    pub base_noise: f64,
    /// Extra noise std per meter of depth.
    pub depth_noise_gain: f64,
    /// Extra noise std at the image border.
    pub boundary_noise_gain: f64,
    pub label_flip_prob: f64,
    /// Depth at which the flip probability saturates, meters.
    pub flip_depth: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            logit_scale: 8.0,
            base_noise: 0.2,
            depth_noise_gain: 0.2,
            boundary_noise_gain: 5.0,
            label_flip_prob: 0.7,
            flip_depth: 1.0,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    /// All noise disabled; the predictor reduces to the oracle.
    pub fn noiseless(logit_scale: f64) -> Self {
        Self {
            logit_scale,
            base_noise: 0.0,
            depth_noise_gain: 0.0,
            boundary_noise_gain: 0.0,
            label_flip_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [
            self.logit_scale,
            self.base_noise,
            self.depth_noise_gain,
            self.boundary_noise_gain,
        ];
        if scalars.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("noise scalars must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.label_flip_prob) {
            return Err(Error::invalid("label_flip_prob must lie in [0, 1]"));
        }
        if !(self.flip_depth > 0.0) {
            return Err(Error::invalid("flip_depth must be positive"));
        }
        Ok(())
    }

    /// Logit/feature noise std for a voxel at depth `d` and boundary proximity `b`.
    pub fn noise_std(&self, d: f64, b: f64) -> f64 {
        self.base_noise + self.depth_noise_gain * d + self.boundary_noise_gain * b
    }

    pub fn flip_probability(&self, d: f64, b: f64) -> f64 {
        self.label_flip_prob * (0.5 + 0.5 * b) * (d / self.flip_depth).min(1.0)
    }
}

/// Per-frame local prediction: logits `[X, Y, Z, N_c]`, features
/// `[X, Y, Z, C_f]` and the frame's prior.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalVolumes {
    pub logits: Array4<f64>,
    pub features: Array4<f64>,
    pub prior: GeometricPrior,
}

impl LocalVolumes {
    pub fn num_classes(&self) -> usize {
        self.logits.shape()[3]
    }

    pub fn validate(&self) -> Result<()> {
        let [x, y, z] = self.prior.grid_shape();
        let ls = self.logits.shape();
        let fs = self.features.shape();
        if ls[..3] != [x, y, z] || fs[..3] != [x, y, z] {
            return Err(Error::ShapeMismatch(format!(
                "local volumes {:?}/{:?} do not match prior grid {:?}",
                ls,
                fs,
                [x, y, z]
            )));
        }
        if self.logits.iter().chain(self.features.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("local volume contains non-finite values".into()));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based stream key for `(seed, frame, voxel)`.
fn stream_key(seed: u64, frame: u64, voxel: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ frame) ^ voxel)
}

fn unit_hash(key: u64) -> f64 {
    (splitmix(key) >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Fixed embedding of a class id in `[-1, 1]^CLASS_EMBED_DIM`.
pub fn class_embedding(class: u8) -> [f64; CLASS_EMBED_DIM] {
    std::array::from_fn(|ch| unit_hash(0xc1a5_5000 + 64 * class as u64 + ch as u64))
}

fn position_hash(c: &VoxelCoord, channel: usize) -> f64 {
    let packed = (c.ix as u64).wrapping_mul(0x1f1f_1f1f)
        ^ (c.iy as u64).wrapping_mul(0x3c3c_3c3c_3c3c)
        ^ (c.iz as u64).wrapping_mul(0x5a5a_5a5a_5a5a_5a5a);
    unit_hash(packed.wrapping_add(channel as u64 * 0x1000_0000_0000))
}

fn clean_features(class: u8, coord: &VoxelCoord, out: &mut [f64]) {
    out[..CLASS_EMBED_DIM].copy_from_slice(&class_embedding(class));
    for (ch, o) in out[CLASS_EMBED_DIM..].iter_mut().enumerate() {
        *o = position_hash(coord, ch);
    }
}

/// Allocates volumes and fills each local voxel (in parallel) with `fill`,
/// which receives the linear voxel index, the local indices `(i, j, k)` and
/// the logit/feature lanes.
fn render<F>(prior: &GeometricPrior, num_classes: usize, fill: F) -> LocalVolumes
where
    F: Fn(usize, usize, usize, usize, &mut [f64], &mut [f64]) + Sync,
{
    let [nx, ny, nz] = prior.grid_shape();
    let mut logits = Array4::<f64>::zeros((nx, ny, nz, num_classes));
    let mut features = Array4::<f64>::zeros((nx, ny, nz, FEATURE_DIM));
    {
        let lz = logits.as_slice_mut().expect("standard layout");
        let fz = features.as_slice_mut().expect("standard layout");
        lz.par_chunks_mut(num_classes)
            .zip(fz.par_chunks_mut(FEATURE_DIM))
            .enumerate()
            .for_each(|(lin, (l, f))| {
                let k = lin % nz;
                let j = (lin / nz) % ny;
                let i = lin / (nz * ny);
                fill(lin, i, j, k, l, f);
            });
    }
    LocalVolumes {
        logits,
        features,
        prior: *prior,
    }
}

/// Noise-free predictor: one-hot logits of height `logit_scale` at the
/// true class and clean features.
pub fn oracle_local(scene: &Scene, prior: &GeometricPrior, logit_scale: f64) -> LocalVolumes {
    let vs = prior.voxel_size;
    render(prior, scene.num_classes(), |_, i, j, k, l, f| {
        let coord = VoxelCoord::containing(&prior.local_center(i, j, k), &vs);
        let class = scene.label_at(&coord);
        l[class as usize] = logit_scale;
        clean_features(class, &coord, f);
    })
}

/// Oracle corrupted by Gaussian noise whose std grows with depth and image
/// boundary proximity, plus label flips that grow likelier in the same
/// regions. Deterministic in `(noise.seed, frame, voxel)`.
pub fn noisy_local(scene: &Scene, prior: &GeometricPrior, noise: &NoiseConfig, frame: u64) -> LocalVolumes {
    let vs = prior.voxel_size;
    let n_c = scene.num_classes();
    render(prior, n_c, |lin, i, j, k, l, f| {
        let center = prior.local_center(i, j, k);
        let coord = VoxelCoord::containing(&center, &vs);
        let truth = scene.label_at(&coord);
        let (d, b) = match project_to_image(&center, prior) {
            Some(pt) => (pt.depth, boundary_proximity(pt.u, pt.v, &prior.intrinsics)),
            None => (prior.pose.world_to_camera(&center).z.abs(), 1.0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(stream_key(noise.seed, frame, lin as u64));
        let flip_draw: f64 = rng.gen();
        let wrong: usize = rng.gen_range(0..n_c - 1);
        let class = if flip_draw < noise.flip_probability(d, b) {
            // Skip over the true class.
            (if wrong >= truth as usize { wrong + 1 } else { wrong }) as u8
        } else {
            truth
        };
        let std = noise.noise_std(d, b);
        l[class as usize] = noise.logit_scale;
        for v in l.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += std * e;
        }
        clean_features(class, &coord, f);
        for v in f.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += std * e;
        }
    })
}
