//! Frame loop: local volumes -> temporal aggregation -> confidence ->
//! global map update, with per-stage toggles.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csu::{logits_to_probs, FusionStrategy, SparseGlobalMap};
use crate::error::{Error, Result};
use crate::geometry::{trilinear_sample, visible_voxels, world_to_local_index, GeometricPrior, VoxelCoord};
use crate::metrics::{evaluate_map, EvalReport, MaskMode};
use crate::rcm::{voxel_confidence, RcmParams};
use crate::sim::{noisy_local, oracle_local, LocalVolumes, NoiseConfig, Scene};
use crate::tla::{build_temporal_pairs, fuse_pair, MlpWeights, TemporalPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub enable_tla: bool,
    pub enable_rcm: bool,
    pub strategy: FusionStrategy,
    pub rcm: RcmParams,
    pub lambda: f64,
    /// Trained fusion weights; zero weights (even 0.5/0.5 fusion) if unset.
    pub mlp_weights_path: Option<PathBuf>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            enable_tla: true,
            enable_rcm: true,
            strategy: FusionStrategy::WeightedProbability,
            rcm: RcmParams::default(),
            lambda: 1.0,
            mlp_weights_path: None,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::invalid(format!("lambda {} outside (0, 1]", self.lambda)));
        }
        self.rcm.validate()
    }
}

/// Source of per-frame local volumes.
pub trait LocalPredictor: Sync {
    fn predict(&self, prior: &GeometricPrior, frame: usize) -> LocalVolumes;
}

/// Noise-free predictor.
pub struct OraclePredictor<'a> {
    pub scene: &'a Scene,
    pub logit_scale: f64,
}

impl LocalPredictor for OraclePredictor<'_> {
    fn predict(&self, prior: &GeometricPrior, _frame: usize) -> LocalVolumes {
        oracle_local(self.scene, prior, self.logit_scale)
    }
}

/// Predictor with depth/boundary-correlated noise.
pub struct NoisyPredictor<'a> {
    pub scene: &'a Scene,
    pub noise: NoiseConfig,
}

impl LocalPredictor for NoisyPredictor<'_> {
    fn predict(&self, prior: &GeometricPrior, frame: usize) -> LocalVolumes {
        noisy_local(self.scene, prior, &self.noise, frame as u64)
    }
}

/// What a frame contributes to the map, before integration.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub visible: Vec<VoxelCoord>,
    pub probs: Vec<Vec<f64>>,
    pub confidence: Vec<f64>,
    /// Number of voxels whose logits were replaced by temporal fusion.
    pub fused: usize,
}

/// State carried from one frame to the next.
#[derive(Debug, Clone)]
pub struct FrameCache {
    pub volumes: LocalVolumes,
    pub visible: Vec<VoxelCoord>,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    mlp: MlpWeights,
}

impl Pipeline {
    /// Loads fusion weights from `cfg.mlp_weights_path` when set.
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mlp = match &cfg.mlp_weights_path {
            Some(p) => MlpWeights::load(p)?,
            None => MlpWeights::default(),
        };
        Self::with_weights(cfg, mlp)
    }

    pub fn with_weights(cfg: PipelineConfig, mlp: MlpWeights) -> Result<Self> {
        cfg.validate()?;
        mlp.validate()?;
        if mlp.in_dim() != crate::tla::IN_DIM {
            return Err(Error::ShapeMismatch(format!(
                "fusion MLP expects {} inputs, pipeline produces {}",
                mlp.in_dim(),
                crate::tla::IN_DIM
            )));
        }
        Ok(Self { cfg, mlp })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &MlpWeights {
        &self.mlp
    }

    pub fn new_map(&self, num_classes: usize, voxel_size: crate::geometry::Vec3) -> Result<SparseGlobalMap> {
        SparseGlobalMap::new(num_classes, voxel_size, self.cfg.lambda)
    }

    /// Per-voxel probabilities and confidences for one frame.
    pub fn observe(&self, prev: Option<&FrameCache>, vol: &LocalVolumes) -> Result<FrameObservation> {
        vol.validate()?;
        let prior = &vol.prior;
        let visible = visible_voxels(prior);
        let mut logits: Vec<Vec<f64>> = visible
            .par_iter()
            .map(|c| trilinear_sample(vol.logits.view(), &world_to_local_index(&c.center(&prior.voxel_size), prior)))
            .collect();

        let mut fused = 0;
        if self.cfg.enable_tla {
            if let Some(prev) = prev {
                if prev.volumes.prior.voxel_size != prior.voxel_size {
                    return Err(Error::ShapeMismatch("voxel size changed between frames".into()));
                }
                let pairs = build_temporal_pairs(&visible, &prev.visible, vol, &prev.volumes);
                let out = pairs
                    .pairs
                    .par_iter()
                    .map(|p| fuse_pair(&self.mlp, p))
                    .collect::<Result<Vec<_>>>()?;
                fused = out.len();
                for (i, z) in pairs.index.into_iter().zip(out) {
                    logits[i] = z;
                }
            }
        }

        let confidence: Vec<f64> = if self.cfg.enable_rcm {
            visible
                .par_iter()
                .map(|c| voxel_confidence(c, prior, &self.cfg.rcm))
                .collect()
        } else {
            vec![1.0; visible.len()]
        };
        let probs = logits.par_iter().map(|z| logits_to_probs(z)).collect();
        Ok(FrameObservation {
            visible,
            probs,
            confidence,
            fused,
        })
    }

    /// Integrates one frame into `map` and returns the cache for the next.
    pub fn step(
        &self,
        map: &mut SparseGlobalMap,
        prev: Option<&FrameCache>,
        vol: LocalVolumes,
    ) -> Result<(FrameCache, FrameObservation)> {
        if vol.num_classes() != map.num_classes() {
            return Err(Error::ShapeMismatch(format!(
                "local volume has {} classes, map has {}",
                vol.num_classes(),
                map.num_classes()
            )));
        }
        if vol.prior.voxel_size != map.voxel_size() {
            return Err(Error::ShapeMismatch("local voxel size differs from map voxel size".into()));
        }
        let obs = self.observe(prev, &vol)?;
        map.integrate_frame(&obs.visible, &obs.probs, &obs.confidence, self.cfg.strategy)?;
        let cache = FrameCache {
            volumes: vol,
            visible: obs.visible.clone(),
        };
        Ok((cache, obs))
    }

    /// Runs the whole trajectory, scoring the map after every frame.
    pub fn run_episode(
        &self,
        scene: &Scene,
        trajectory: &[GeometricPrior],
        predictor: &dyn LocalPredictor,
        mask: MaskMode,
    ) -> Result<Episode> {
        if trajectory.is_empty() {
            return Err(Error::invalid("trajectory is empty"));
        }
        let mut map = self.new_map(scene.num_classes(), scene.voxel_size())?;
        let mut cache: Option<FrameCache> = None;
        let mut trace = Vec::with_capacity(trajectory.len());
        for (frame, prior) in trajectory.iter().enumerate() {
            let vol = predictor.predict(prior, frame);
            let (next, obs) = self.step(&mut map, cache.as_ref(), vol)?;
            cache = Some(next);
            let r = evaluate_map(&map, scene, mask)?;
            trace.push(FrameMetrics {
                frame,
                iou: r.iou,
                miou: r.miou,
                visible: obs.visible.len(),
                fused: obs.fused,
                map_size: map.len(),
            });
        }
        let report = evaluate_map(&map, scene, mask)?;
        Ok(Episode { map, report, trace })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub iou: f64,
    pub miou: f64,
    pub visible: usize,
    pub fused: usize,
    pub map_size: usize,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub map: SparseGlobalMap,
    pub report: EvalReport,
    pub trace: Vec<FrameMetrics>,
}

/// Labeled temporal pairs from consecutive frames of a trajectory, for
/// training the fusion MLP. With `max_per_frame`, each frame contributes a
/// random subset of that size drawn from a generator seeded with `seed`.
pub fn collect_training_pairs(
    scene: &Scene,
    trajectory: &[GeometricPrior],
    predictor: &dyn LocalPredictor,
    max_per_frame: Option<usize>,
    seed: u64,
) -> Vec<(TemporalPair, u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut prev: Option<(LocalVolumes, Vec<VoxelCoord>)> = None;
    for (frame, prior) in trajectory.iter().enumerate() {
        let vol = predictor.predict(prior, frame);
        let visible = visible_voxels(prior);
        if let Some((pv, pvis)) = &prev {
            let mut pairs = build_temporal_pairs(&visible, pvis, &vol, pv).pairs;
            if let Some(m) = max_per_frame {
                if pairs.len() > m {
                    let keep = rand::seq::index::sample(&mut rng, pairs.len(), m).into_vec();
                    let mut mask = vec![false; pairs.len()];
                    keep.into_iter().for_each(|i| mask[i] = true);
                    let mut it = mask.into_iter();
                    pairs.retain(|_| it.next().unwrap_or(false));
                }
            }
            out.extend(pairs.into_iter().map(|p| {
                let label = scene.label_at(&p.voxel);
                (p, label)
            }));
        }
        prev = Some((vol, visible));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_scene, generate_trajectory, RoomConfig, TrajectoryConfig};

    fn small() -> (Scene, Vec<GeometricPrior>) {
        let scene = generate_scene(&RoomConfig::default(), 4).unwrap();
        let traj = generate_trajectory(
            &scene,
            &TrajectoryConfig {
                n_frames: 6,
                seed: 4,
                ..TrajectoryConfig::default()
            },
        )
        .unwrap();
        (scene, traj)
    }

    #[test]
    fn single_frame_episode_initializes_visible_voxels() {
        let (scene, traj) = small();
        let p = Pipeline::new(PipelineConfig::default()).unwrap();
        let pred = NoisyPredictor {
            scene: &scene,
            noise: NoiseConfig::default(),
        };
        let ep = p.run_episode(&scene, &traj[..1], &pred, MaskMode::Visited).unwrap();
        let vis = visible_voxels(&traj[0]);
        assert_eq!(ep.map.len(), vis.len());
        assert!(ep.map.values().all(|s| s.count == 1));
        assert_eq!(ep.trace.len(), 1);
    }

    #[test]
    fn trace_has_one_row_per_frame() {
        let (scene, traj) = small();
        let p = Pipeline::new(PipelineConfig::default()).unwrap();
        let pred = OraclePredictor {
            scene: &scene,
            logit_scale: 4.0,
        };
        let ep = p.run_episode(&scene, &traj, &pred, MaskMode::Visited).unwrap();
        assert_eq!(ep.trace.len(), traj.len());
        assert_eq!(ep.trace[0].fused, 0);
        assert!(ep.trace[1..].iter().any(|t| t.fused > 0));
        assert_eq!(ep.report.miou, 1.0);
    }

    #[test]
    fn overwrite_without_modules_tracks_latest_frame() {
        let (scene, traj) = small();
        let cfg = PipelineConfig {
            enable_tla: false,
            enable_rcm: false,
            strategy: FusionStrategy::Overwrite,
            ..PipelineConfig::default()
        };
        let p = Pipeline::new(cfg).unwrap();
        let pred = NoisyPredictor {
            scene: &scene,
            noise: NoiseConfig::default(),
        };
        let mut map = p.new_map(12, scene.voxel_size()).unwrap();
        let mut cache = None;
        let mut last = None;
        for (f, prior) in traj.iter().enumerate() {
            let (c, obs) = p.step(&mut map, cache.as_ref(), pred.predict(prior, f)).unwrap();
            cache = Some(c);
            last = Some(obs);
        }
        let obs = last.unwrap();
        for (v, s) in obs.visible.iter().zip(&obs.probs) {
            assert_eq!(map.get(v).unwrap().label() as usize, crate::csu::argmax(s));
        }
    }

    #[test]
    fn rejects_mismatched_classes() {
        let (scene, traj) = small();
        let p = Pipeline::new(PipelineConfig::default()).unwrap();
        let mut map = p.new_map(5, scene.voxel_size()).unwrap();
        let vol = oracle_local(&scene, &traj[0], 1.0);
        assert!(p.step(&mut map, None, vol).is_err());
    }
}
