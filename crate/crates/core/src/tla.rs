//! Cross-temporal logit aggregation.
//!
//! Voxels visible in two consecutive frames get their logits replaced by a
//! convex combination of both frames' logits. The mixing weights come from
//! a small MLP over the voxel's features and positional encodings at each
//! timestep, together with their difference and elementwise product.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{positional_encoding, trilinear_sample, world_to_local_index, VoxelCoord, POSITION_INPUTS};
use crate::sim::{LocalVolumes, FEATURE_DIM};

/// Frequency bands of the positional encoding.
pub const PE_BANDS: usize = 4;
/// Positional-encoding width per timestep.
pub const PE_DIM: usize = 2 * POSITION_INPUTS * PE_BANDS;
/// Pair-feature width for a given feature width and encoding width.
pub const fn pair_dim(feature_dim: usize, pe_dim: usize) -> usize {
    2 * (feature_dim + pe_dim) + 2 * feature_dim
}
pub const IN_DIM: usize = pair_dim(FEATURE_DIM, PE_DIM);
pub const HIDDEN: usize = 32;

/// A voxel seen at `t` and `t - 1`, with everything sampled from both frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalPair {
    pub voxel: VoxelCoord,
    pub z_t: Vec<f64>,
    pub z_prev: Vec<f64>,
    pub f_t: Vec<f64>,
    pub f_prev: Vec<f64>,
    pub pe_t: Vec<f64>,
    pub pe_prev: Vec<f64>,
}

/// Temporal pairs plus, for each pair, its position in the current
/// frame's visible list.
#[derive(Debug, Clone, Default)]
pub struct TemporalPairs {
    pub pairs: Vec<TemporalPair>,
    pub index: Vec<usize>,
}

/// Sorted-list intersection of `visible_t` with `visible_prev`, returning
/// positions in `visible_t`.
fn intersect_sorted(visible_t: &[VoxelCoord], visible_prev: &[VoxelCoord]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut j = 0;
    for (i, c) in visible_t.iter().enumerate() {
        while j < visible_prev.len() && visible_prev[j] < *c {
            j += 1;
        }
        if j < visible_prev.len() && visible_prev[j] == *c {
            out.push(i);
        }
    }
    out
}

/// Builds pairs for voxels of `visible_t` (sorted, as produced by
/// `visible_voxels`) that are also in `visible_prev`.
pub fn build_temporal_pairs(
    visible_t: &[VoxelCoord],
    visible_prev: &[VoxelCoord],
    vol_t: &LocalVolumes,
    vol_prev: &LocalVolumes,
) -> TemporalPairs {
    let index = intersect_sorted(visible_t, visible_prev);
    let vs = vol_t.prior.voxel_size;
    let pairs = index
        .par_iter()
        .map(|&i| {
            let voxel = visible_t[i];
            let p = voxel.center(&vs);
            let sample = |vol: &LocalVolumes| {
                let idx = world_to_local_index(&p, &vol.prior);
                (
                    trilinear_sample(vol.logits.view(), &idx),
                    trilinear_sample(vol.features.view(), &idx),
                    positional_encoding(&p, &vol.prior, PE_BANDS).unwrap_or_else(|| vec![0.0; PE_DIM]),
                )
            };
            let (z_t, f_t, pe_t) = sample(vol_t);
            let (z_prev, f_prev, pe_prev) = sample(vol_prev);
            TemporalPair {
                voxel,
                z_t,
                z_prev,
                f_t,
                f_prev,
                pe_t,
                pe_prev,
            }
        })
        .collect();
    TemporalPairs { pairs, index }
}

/// `[f_t, pe_t, f_prev, pe_prev, f_t - f_prev, f_t * f_prev]`.
pub fn pair_feature(pair: &TemporalPair) -> Vec<f64> {
    let mut out = Vec::with_capacity(pair_dim(pair.f_t.len(), pair.pe_t.len()));
    out.extend_from_slice(&pair.f_t);
    out.extend_from_slice(&pair.pe_t);
    out.extend_from_slice(&pair.f_prev);
    out.extend_from_slice(&pair.pe_prev);
    out.extend(pair.f_t.iter().zip(&pair.f_prev).map(|(a, b)| a - b));
    out.extend(pair.f_t.iter().zip(&pair.f_prev).map(|(a, b)| a * b));
    out
}

/// Two-layer MLP `in_dim -> hidden (ReLU) -> 2`. Matrices are row-major,
/// one row per output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    in_dim: usize,
    hidden: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    shape: [usize; 2],
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpRecord {
    in_dim: usize,
    hidden: usize,
    layer1: LayerRecord,
    layer2: LayerRecord,
}

impl MlpWeights {
    /// All-zero weights: every input fuses with weights (0.5, 0.5).
    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        Self {
            in_dim,
            hidden,
            w1: vec![0.0; hidden * in_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; 2 * hidden],
            b2: vec![0.0; 2],
        }
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn init(in_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(in_dim, hidden);
        let a1 = 1.0 / (in_dim as f64).sqrt();
        w.w1.iter_mut().for_each(|v| *v = rng.gen_range(-a1..=a1));
        let a2 = 1.0 / (hidden as f64).sqrt();
        w.w2.iter_mut().for_each(|v| *v = rng.gen_range(-a2..=a2));
        w
    }

    pub fn from_parts(
        in_dim: usize,
        hidden: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        let w = Self {
            in_dim,
            hidden,
            w1,
            b1,
            w2,
            b2,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w1.len() != self.hidden * self.in_dim
            || self.b1.len() != self.hidden
            || self.w2.len() != 2 * self.hidden
            || self.b2.len() != 2
        {
            return Err(Error::ShapeMismatch(format!(
                "MLP tensors do not match in_dim={} hidden={}",
                self.in_dim, self.hidden
            )));
        }
        if self.params().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("MLP weights".into()));
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters in the order `w1, b1, w2, b2`.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    /// Output logits of the MLP and the hidden pre-activations.
    fn forward(&self, x: &[f64], pre: &mut [f64]) -> [f64; 2] {
        for (h, p) in pre.iter_mut().enumerate() {
            let row = &self.w1[h * self.in_dim..(h + 1) * self.in_dim];
            *p = self.b1[h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        let mut out = [self.b2[0], self.b2[1]];
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            *slot += row.iter().zip(pre.iter()).map(|(w, &p)| w * relu(p)).sum::<f64>();
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = MlpRecord {
            in_dim: self.in_dim,
            hidden: self.hidden,
            layer1: LayerRecord {
                shape: [self.hidden, self.in_dim],
                weights: self.w1.clone(),
                bias: self.b1.clone(),
            },
            layer2: LayerRecord {
                shape: [2, self.hidden],
                weights: self.w2.clone(),
                bias: self.b2.clone(),
            },
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: MlpRecord = serde_json::from_str(s)?;
        if rec.layer1.shape != [rec.hidden, rec.in_dim] || rec.layer2.shape != [2, rec.hidden] {
            return Err(Error::ShapeMismatch(format!(
                "layer shapes {:?}/{:?} disagree with in_dim={} hidden={}",
                rec.layer1.shape, rec.layer2.shape, rec.in_dim, rec.hidden
            )));
        }
        Self::from_parts(
            rec.in_dim,
            rec.hidden,
            rec.layer1.weights,
            rec.layer1.bias,
            rec.layer2.weights,
            rec.layer2.bias,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

impl Default for MlpWeights {
    fn default() -> Self {
        Self::zeros(IN_DIM, HIDDEN)
    }
}

/// ReLU that lets NaN through so corrupted weights are detected downstream.
fn relu(x: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else {
        x
    }
}

fn softmax2(o: [f64; 2]) -> (f64, f64) {
    let m = o[0].max(o[1]);
    let a = (o[0] - m).exp();
    let b = (o[1] - m).exp();
    (a / (a + b), b / (a + b))
}

/// Fusion weights `(w_t, w_prev)` for one pair feature vector.
pub fn fusion_weights(w: &MlpWeights, feat: &[f64]) -> Result<(f64, f64)> {
    if feat.len() != w.in_dim {
        return Err(Error::ShapeMismatch(format!(
            "pair feature has {} entries, MLP expects {}",
            feat.len(),
            w.in_dim
        )));
    }
    let mut pre = vec![0.0; w.hidden];
    let o = w.forward(feat, &mut pre);
    if !(o[0].is_finite() && o[1].is_finite()) {
        return Err(Error::NonFinite("MLP output (check weights and inputs)".into()));
    }
    Ok(softmax2(o))
}

/// `w_t * z_t + w_prev * z_prev`.
pub fn aggregate_logits(z_t: &[f64], z_prev: &[f64], w_t: f64, w_prev: f64) -> Vec<f64> {
    z_t.iter().zip(z_prev).map(|(a, b)| w_t * a + w_prev * b).collect()
}

/// Cross-entropy `-log softmax(z)[label]`.
pub fn ce_loss(z: &[f64], label: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[label]
}

/// Fuses a pair end to end.
pub fn fuse_pair(w: &MlpWeights, pair: &TemporalPair) -> Result<Vec<f64>> {
    let (wt, wp) = fusion_weights(w, &pair_feature(pair))?;
    Ok(aggregate_logits(&pair.z_t, &pair.z_prev, wt, wp))
}

/// Mean cross-entropy of fused logits over a labeled batch.
pub fn batch_loss(w: &MlpWeights, batch: &[(TemporalPair, u8)]) -> Result<f64> {
    let mut total = 0.0;
    for (pair, label) in batch {
        total += ce_loss(&fuse_pair(w, pair)?, *label as usize);
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of [`batch_loss`] with respect to every parameter, in
/// [`MlpWeights::params`] order, plus the loss itself.
pub fn loss_gradient(w: &MlpWeights, batch: &[(TemporalPair, u8)]) -> Result<(MlpWeights, f64)> {
    if batch.is_empty() {
        return Err(Error::invalid("training batch is empty"));
    }
    let mut grad = MlpWeights::zeros(w.in_dim, w.hidden);
    let mut pre = vec![0.0; w.hidden];
    let mut dpre = vec![0.0; w.hidden];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;

    for (pair, label) in batch {
        let x = pair_feature(pair);
        if x.len() != w.in_dim {
            return Err(Error::ShapeMismatch("pair feature width".into()));
        }
        let o = w.forward(&x, &mut pre);
        let (wt, wp) = softmax2(o);
        let z = aggregate_logits(&pair.z_t, &pair.z_prev, wt, wp);
        loss += ce_loss(&z, *label as usize);

        // dL/dz = softmax(z) - onehot(label)
        let p = crate::csu::logits_to_probs(&z);
        let mut g_wt = 0.0;
        let mut g_wp = 0.0;
        for (k, pk) in p.iter().enumerate() {
            let g = pk - if k == *label as usize { 1.0 } else { 0.0 };
            g_wt += g * pair.z_t[k];
            g_wp += g * pair.z_prev[k];
        }
        // Through the 2-way softmax.
        let mean = wt * g_wt + wp * g_wp;
        let d_o = [wt * (g_wt - mean) * scale, wp * (g_wp - mean) * scale];

        for (o, d) in d_o.iter().enumerate() {
            grad.b2[o] += d;
            for h in 0..w.hidden {
                grad.w2[o * w.hidden + h] += d * relu(pre[h]);
            }
        }
        for h in 0..w.hidden {
            dpre[h] = if pre[h] > 0.0 {
                d_o[0] * w.w2[h] + d_o[1] * w.w2[w.hidden + h]
            } else {
                0.0
            };
        }
        for (h, d) in dpre.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            grad.b1[h] += d;
            let row = &mut grad.w1[h * w.in_dim..(h + 1) * w.in_dim];
            for (g, xi) in row.iter_mut().zip(&x) {
                *g += d * xi;
            }
        }
    }
    Ok((grad, loss * scale))
}

/// One SGD step on the mean cross-entropy. Returns the updated weights and
/// the pre-step loss.
pub fn train_step(w: &MlpWeights, batch: &[(TemporalPair, u8)], lr: f64) -> Result<(MlpWeights, f64)> {
    let (grad, loss) = loss_gradient(w, batch)?;
    if !loss.is_finite() || grad.params().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("TLA gradient".into()));
    }
    let mut next = w.clone();
    for (p, g) in next.params_mut().zip(grad.params()) {
        *p -= lr * g;
    }
    Ok((next, loss))
}
