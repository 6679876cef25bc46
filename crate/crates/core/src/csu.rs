//! Sparse global semantic map and its confidence-weighted incremental update.
//!
//! Each observed voxel stores `(coord, probs, confidence, count)`. A first
//! observation initializes the entry; later ones are merged by the active
//! [`FusionStrategy`]. The default strategy keeps a confidence-weighted
//! running mean of class probabilities, with the history weighted by
//! `lambda * count * confidence`.

use std::collections::hash_map::{DefaultHasher, Entry};
use std::collections::HashMap;
use std::fmt;
use std::hash::BuildHasherDefault;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Vec3, VoxelCoord};

const SIMPLEX_TOL: f64 = 1e-9;
const AXIS_BITS: u32 = 21;
const AXIS_BIAS: i64 = 1 << (AXIS_BITS - 1);

/// How a new observation is merged into an existing voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Confidence-weighted running mean of probabilities.
    #[default]
    WeightedProbability,
    /// The same recursion on log-probabilities, renormalized.
    WeightedLogit,
    /// Keep whichever of old and new has the larger `confidence * max(probs)`.
    HighestProbability,
    /// Latest observation wins.
    Overwrite,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::WeightedProbability,
        FusionStrategy::WeightedLogit,
        FusionStrategy::HighestProbability,
        FusionStrategy::Overwrite,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionStrategy::WeightedProbability => "weighted_probability",
            FusionStrategy::WeightedLogit => "weighted_logit",
            FusionStrategy::HighestProbability => "highest_probability",
            FusionStrategy::Overwrite => "overwrite",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fusion strategy `{s}`")))
    }
}

/// One entry of the global map.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelState {
    pub coord: VoxelCoord,
    pub probs: Vec<f64>,
    pub confidence: f64,
    pub count: u32,
}

impl VoxelState {
    /// Most likely class, lowest index on ties.
    pub fn label(&self) -> u8 {
        argmax(&self.probs) as u8
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn logits_to_probs(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

fn check_simplex(s: &[f64]) -> Result<()> {
    if s.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::invalid("probabilities must be finite and non-negative"));
    }
    let sum: f64 = s.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("probabilities sum to {sum}, expected 1")));
    }
    Ok(())
}

fn check_confidence(c: f64) -> Result<()> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::invalid(format!("confidence {c} outside (0, 1]")));
    }
    Ok(())
}

/// State of a voxel seen for the first time.
pub fn init_voxel(coord: VoxelCoord, probs: &[f64], confidence: f64) -> Result<VoxelState> {
    check_simplex(probs)?;
    check_confidence(confidence)?;
    Ok(VoxelState {
        coord,
        probs: probs.to_vec(),
        confidence,
        count: 1,
    })
}

/// Confidence-weighted recursive update:
///
/// ```text
/// s' = (lambda * n * c * s + c_new * s_new) / (lambda * n * c + c_new)
/// c' = (lambda * n * c + c_new) / (lambda * n + 1)
/// n' = n + 1
/// ```
pub fn fuse_voxel(prev: &VoxelState, probs: &[f64], confidence: f64, lambda: f64) -> VoxelState {
    let hist = lambda * prev.count as f64 * prev.confidence;
    let denom = hist + confidence;
    assert!(denom > 0.0, "fusion weight must be positive");
    let fused = prev
        .probs
        .iter()
        .zip(probs)
        .map(|(p, s)| (hist * p + confidence * s) / denom)
        .collect();
    VoxelState {
        coord: prev.coord,
        probs: fused,
        confidence: denom / (lambda * prev.count as f64 + 1.0),
        count: prev.count + 1,
    }
}

/// [`fuse_voxel`] applied to log-probabilities; the result is mapped back to
/// the simplex with a softmax.
pub fn fuse_voxel_log(prev: &VoxelState, probs: &[f64], confidence: f64, lambda: f64) -> VoxelState {
    let hist = lambda * prev.count as f64 * prev.confidence;
    let denom = hist + confidence;
    assert!(denom > 0.0, "fusion weight must be positive");
    let ln = |p: f64| p.max(f64::MIN_POSITIVE).ln();
    let fused: Vec<f64> = prev
        .probs
        .iter()
        .zip(probs)
        .map(|(p, s)| (hist * ln(*p) + confidence * ln(*s)) / denom)
        .collect();
    VoxelState {
        coord: prev.coord,
        probs: logits_to_probs(&fused),
        confidence: denom / (lambda * prev.count as f64 + 1.0),
        count: prev.count + 1,
    }
}

fn merge(
    prev: &VoxelState,
    probs: &[f64],
    confidence: f64,
    lambda: f64,
    strategy: FusionStrategy,
) -> VoxelState {
    match strategy {
        FusionStrategy::WeightedProbability => fuse_voxel(prev, probs, confidence, lambda),
        FusionStrategy::WeightedLogit => fuse_voxel_log(prev, probs, confidence, lambda),
        FusionStrategy::HighestProbability => {
            let peak = |s: &[f64]| s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let keep_prev = prev.confidence * peak(&prev.probs) >= confidence * peak(probs);
            let mut next = if keep_prev {
                prev.clone()
            } else {
                VoxelState {
                    coord: prev.coord,
                    probs: probs.to_vec(),
                    confidence,
                    count: prev.count,
                }
            };
            next.count += 1;
            next
        }
        FusionStrategy::Overwrite => VoxelState {
            coord: prev.coord,
            probs: probs.to_vec(),
            confidence,
            count: prev.count + 1,
        },
    }
}

/// Packs a coordinate into 21 bits per axis, order-preserving.
pub fn pack_coord(c: &VoxelCoord) -> Result<u64> {
    let mut key = 0u64;
    for v in c.as_array() {
        if !(-AXIS_BIAS..AXIS_BIAS).contains(&v) {
            return Err(Error::CoordOverflow(c.ix, c.iy, c.iz));
        }
        key = (key << AXIS_BITS) | (v + AXIS_BIAS) as u64;
    }
    Ok(key)
}

pub fn unpack_coord(key: u64) -> VoxelCoord {
    let mask = (1u64 << AXIS_BITS) - 1;
    let axis = |shift: u32| ((key >> shift) & mask) as i64 - AXIS_BIAS;
    VoxelCoord::new(axis(2 * AXIS_BITS), axis(AXIS_BITS), axis(0))
}

type KeyMap = HashMap<u64, VoxelState, BuildHasherDefault<DefaultHasher>>;

/// Open-ended sparse map of observed voxels.
#[derive(Debug, Clone)]
pub struct SparseGlobalMap {
    entries: KeyMap,
    num_classes: usize,
    voxel_size: Vec3,
    lambda: f64,
    bounds: Option<(VoxelCoord, VoxelCoord)>,
}

impl SparseGlobalMap {
    pub fn new(num_classes: usize, voxel_size: Vec3, lambda: f64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::invalid(format!("lambda {lambda} outside (0, 1]")));
        }
        if voxel_size.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("voxel_size must be positive"));
        }
        Ok(Self {
            entries: KeyMap::default(),
            num_classes,
            voxel_size,
            lambda,
            bounds: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn voxel_size(&self) -> Vec3 {
        self.voxel_size
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inclusive lattice bounding box of all keys.
    pub fn bounds(&self) -> Option<(VoxelCoord, VoxelCoord)> {
        self.bounds
    }

    pub fn get(&self, c: &VoxelCoord) -> Option<&VoxelState> {
        pack_coord(c).ok().and_then(|k| self.entries.get(&k))
    }

    /// Entries ordered by `(ix, iy, iz)`.
    pub fn entries_sorted(&self) -> Vec<&VoxelState> {
        let mut keys: Vec<&u64> = self.entries.keys().collect();
        keys.sort_unstable();
        keys.into_iter().map(|k| &self.entries[k]).collect()
    }

    pub fn values(&self) -> impl Iterator<Item = &VoxelState> {
        self.entries.values()
    }

    fn grow(&mut self, c: &VoxelCoord) {
        self.bounds = Some(match self.bounds {
            None => (*c, *c),
            Some((lo, hi)) => (
                VoxelCoord::new(lo.ix.min(c.ix), lo.iy.min(c.iy), lo.iz.min(c.iz)),
                VoxelCoord::new(hi.ix.max(c.ix), hi.iy.max(c.iy), hi.iz.max(c.iz)),
            ),
        });
    }

    /// Inserts a state verbatim (used when loading dumps and by tests).
    pub fn insert(&mut self, state: VoxelState) -> Result<()> {
        if state.probs.len() != self.num_classes {
            return Err(Error::ShapeMismatch("probability vector length != num_classes".into()));
        }
        let key = pack_coord(&state.coord)?;
        self.grow(&state.coord);
        self.entries.insert(key, state);
        Ok(())
    }

    /// Merges one frame of observations. `probs[i]` and `confidence[i]`
    /// belong to `visible[i]`.
    pub fn integrate_frame(
        &mut self,
        visible: &[VoxelCoord],
        probs: &[Vec<f64>],
        confidence: &[f64],
        strategy: FusionStrategy,
    ) -> Result<()> {
        if visible.len() != probs.len() || visible.len() != confidence.len() {
            return Err(Error::ShapeMismatch(format!(
                "frame lists are misaligned: {} voxels, {} probability vectors, {} confidences",
                visible.len(),
                probs.len(),
                confidence.len()
            )));
        }
        if let Some(bad) = probs.iter().find(|p| p.len() != self.num_classes) {
            return Err(Error::ShapeMismatch(format!(
                "probability vector of length {} for {} classes",
                bad.len(),
                self.num_classes
            )));
        }
        let keys = visible.iter().map(pack_coord).collect::<Result<Vec<_>>>()?;
        for ((coord, key), (s, &c)) in visible.iter().zip(keys).zip(probs.iter().zip(confidence)) {
            match self.entries.entry(key) {
                Entry::Vacant(slot) => {
                    slot.insert(init_voxel(*coord, s, c)?);
                }
                Entry::Occupied(mut slot) => {
                    check_simplex(s)?;
                    check_confidence(c)?;
                    let next = merge(slot.get(), s, c, self.lambda, strategy);
                    slot.insert(next);
                }
            }
            self.grow(coord);
        }
        Ok(())
    }

    /// Dense label grid over the key bounding box; unobserved cells are 0.
    pub fn densify(&self) -> Result<DenseGrid> {
        let (lo, hi) = self.bounds.ok_or(Error::EmptyMap)?;
        let shape = [
            (hi.ix - lo.ix + 1) as usize,
            (hi.iy - lo.iy + 1) as usize,
            (hi.iz - lo.iz + 1) as usize,
        ];
        let mut labels = Array3::<u8>::zeros(shape);
        for s in self.entries.values() {
            let c = s.coord;
            labels[[
                (c.ix - lo.ix) as usize,
                (c.iy - lo.iy) as usize,
                (c.iz - lo.iz) as usize,
            ]] = s.label();
        }
        Ok(DenseGrid { labels, origin: lo })
    }
}

/// Dense label volume whose cell `(0, 0, 0)` sits at lattice index `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    pub labels: Array3<u8>,
    pub origin: VoxelCoord,
}

impl DenseGrid {
    pub fn shape(&self) -> [usize; 3] {
        let s = self.labels.shape();
        [s[0], s[1], s[2]]
    }

    /// Non-empty cells as `(coord, label)` in lattice order.
    pub fn to_sparse(&self) -> Vec<(VoxelCoord, u8)> {
        self.labels
            .indexed_iter()
            .filter(|(_, &l)| l != 0)
            .map(|((i, j, k), &l)| {
                (
                    VoxelCoord::new(
                        self.origin.ix + i as i64,
                        self.origin.iy + j as i64,
                        self.origin.iz + k as i64,
                    ),
                    l,
                )
            })
            .collect()
    }
}
