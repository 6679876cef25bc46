//! Library side of the command-line entry points. Each command takes a
//! parsed config and writes its outputs; thread pools are set up by callers.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{PredictorKind, ScenarioConfig};
use crate::csu::FusionStrategy;
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, GeometricPrior};
use crate::io::{self, AblationRow, AblationSummary};
use crate::metrics::EvalReport;
use crate::pipeline::{collect_training_pairs, Episode, LocalPredictor, NoisyPredictor, OraclePredictor, Pipeline};
use crate::sim::{generate_scene, generate_trajectory, priors_from_poses, Scene};
use crate::tla::{self, MlpWeights};

/// Runs `f` on a dedicated pool with `threads` workers (rayon's default when
/// `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::invalid("thread count must be at least 1"));
        }
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(pool.install(f))
}

/// Scene and camera priors for the configured episode.
pub fn build_episode(cfg: &ScenarioConfig) -> Result<(Scene, Vec<GeometricPrior>)> {
    let scene = generate_scene(&cfg.scene, cfg.seed)?;
    let priors = match &cfg.trajectory.pose_file {
        Some(p) => {
            let poses = io::read_poses_json(p)?;
            if poses.is_empty() {
                return Err(Error::invalid(format!("{} holds no poses", p.display())));
            }
            priors_from_poses(&poses, &cfg.trajectory, &scene.voxel_size())?
        }
        None => generate_trajectory(&scene, &cfg.trajectory)?,
    };
    Ok((scene, priors))
}

pub fn predictor_for<'a>(cfg: &ScenarioConfig, scene: &'a Scene) -> Box<dyn LocalPredictor + 'a> {
    match cfg.predictor {
        PredictorKind::Noisy => Box::new(NoisyPredictor {
            scene,
            noise: cfg.noise.clone(),
        }),
        PredictorKind::Oracle => Box::new(OraclePredictor {
            scene,
            logit_scale: cfg.noise.logit_scale,
        }),
    }
}

/// Runs one episode without writing anything.
pub fn run_scenario(cfg: &ScenarioConfig, pipeline: &Pipeline) -> Result<Episode> {
    let (scene, priors) = build_episode(cfg)?;
    let predictor = predictor_for(cfg, &scene);
    pipeline.run_episode(&scene, &priors, predictor.as_ref(), cfg.metrics.mask)
}

/// Runs the configured episode and writes the map dump (+ sidecar), the
/// metrics JSON and the per-frame trace.
pub fn cmd_run(cfg: &ScenarioConfig) -> Result<EvalReport> {
    check_output_dir(cfg)?;
    let pipeline = Pipeline::new(cfg.pipeline.clone())?;
    let ep = run_scenario(cfg, &pipeline)?;
    io::write_map(&cfg.map_path(), &ep.map, cfg.pipeline.strategy, cfg.output.dump_probs)?;
    io::write_json(&cfg.metrics_path(), &ep.report)?;
    io::write_atomic(&cfg.trace_path(), io::trace_to_csv(&ep.trace).as_bytes())?;
    Ok(ep.report)
}

fn check_output_dir(cfg: &ScenarioConfig) -> Result<()> {
    if !cfg.output.dir.is_dir() {
        return Err(Error::io(
            &cfg.output.dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    Ok(())
}

/// Every strategy x TLA x RCM combination, in table order.
pub fn ablation_grid() -> Vec<(FusionStrategy, bool, bool)> {
    let mut g = Vec::with_capacity(16);
    for s in FusionStrategy::ALL {
        for tla in [true, false] {
            for rcm in [true, false] {
                g.push((s, tla, rcm));
            }
        }
    }
    g
}

/// Ablation rows for seeds `0..seeds` (offsets applied to every config seed).
/// The scene, trajectory and local predictions are shared across the grid
/// within a seed.
pub fn ablation_rows(cfg: &ScenarioConfig, seeds: u64, grid: &[(FusionStrategy, bool, bool)]) -> Result<Vec<AblationRow>> {
    let weights = match &cfg.pipeline.mlp_weights_path {
        Some(p) => MlpWeights::load(p)?,
        None => MlpWeights::default(),
    };
    let mut rows = Vec::with_capacity(grid.len() * seeds as usize);
    for k in 0..seeds {
        let c = cfg.with_seed_offset(k);
        let (scene, priors) = build_episode(&c)?;
        let predictor = predictor_for(&c, &scene);
        let volumes: Vec<_> = priors
            .iter()
            .enumerate()
            .map(|(f, p)| predictor.predict(p, f))
            .collect();
        let cached = CachedPredictor { volumes: &volumes };
        for &(strategy, tla, rcm) in grid {
            let mut pc = c.pipeline.clone();
            pc.strategy = strategy;
            pc.enable_tla = tla;
            pc.enable_rcm = rcm;
            let pipeline = Pipeline::with_weights(pc, weights.clone())?;
            let ep = pipeline.run_episode(&scene, &priors, &cached, c.metrics.mask)?;
            rows.push(AblationRow {
                strategy,
                tla,
                rcm,
                seed: k,
                iou: ep.report.iou,
                miou: ep.report.miou,
            });
        }
    }
    Ok(rows)
}

struct CachedPredictor<'a> {
    volumes: &'a [crate::sim::LocalVolumes],
}

impl LocalPredictor for CachedPredictor<'_> {
    fn predict(&self, _prior: &GeometricPrior, frame: usize) -> crate::sim::LocalVolumes {
        self.volumes[frame].clone()
    }
}

/// Runs the 16-cell ablation grid over `seeds` seeds and writes the rows
/// plus a `<name>_summary.csv` of per-cell means.
pub fn cmd_ablate(cfg: &ScenarioConfig, seeds: u64) -> Result<(Vec<AblationRow>, Vec<AblationSummary>)> {
    if seeds == 0 {
        return Err(Error::invalid("--seeds must be at least 1"));
    }
    check_output_dir(cfg)?;
    let rows = ablation_rows(cfg, seeds, &ablation_grid())?;
    let summary = io::summarize(&rows);
    let path = cfg.ablation_path();
    io::write_atomic(&path, io::ablation_to_csv(&rows).as_bytes())?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let summary_path = path.with_file_name(format!("{stem}_summary.csv"));
    io::write_atomic(&summary_path, io::summary_to_csv(&summary).as_bytes())?;
    Ok((rows, summary))
}

/// Labeled temporal pairs from `cfg.train.episodes` episodes, seeded apart
/// from the evaluation episodes.
pub fn training_pairs(cfg: &ScenarioConfig) -> Result<Vec<(tla::TemporalPair, u8)>> {
    let mut out = Vec::new();
    for e in 0..cfg.train.episodes as u64 {
        let c = cfg.with_seed_offset(cfg.train.seed_offset.wrapping_add(e));
        let (scene, priors) = build_episode(&c)?;
        let predictor = predictor_for(&c, &scene);
        out.extend(collect_training_pairs(
            &scene,
            &priors,
            predictor.as_ref(),
            Some(cfg.train.pairs_per_frame),
            c.pipeline.seed,
        ));
    }
    Ok(out)
}

/// Trains the fusion MLP with SGD for `epochs` passes, returning the weights
/// and the mean minibatch loss of each epoch. Fails on a non-finite loss.
pub fn train_tla(
    cfg: &ScenarioConfig,
    epochs: usize,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(MlpWeights, Vec<f64>)> {
    let mut w = MlpWeights::init(tla::IN_DIM, tla::HIDDEN, cfg.pipeline.seed);
    if epochs == 0 {
        return Ok((w, Vec::new()));
    }
    let mut data = training_pairs(cfg)?;
    if data.is_empty() {
        return Err(Error::invalid("training episodes produced no temporal pairs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pipeline.seed);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        data.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for batch in data.chunks(cfg.train.batch_size) {
            let (next, loss) = tla::train_step(&w, batch, cfg.train.learning_rate)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss diverged in epoch {}", epoch + 1)));
            }
            w = next;
            sum += loss;
            n += 1;
        }
        let mean = sum / n as f64;
        on_epoch(epoch + 1, mean);
        losses.push(mean);
    }
    Ok((w, losses))
}

/// Trains and writes the weights JSON to `out`.
pub fn cmd_train_tla(cfg: &ScenarioConfig, epochs: usize, out: &Path, on_epoch: impl FnMut(usize, f64)) -> Result<Vec<f64>> {
    let (w, losses) = train_tla(cfg, epochs, on_epoch)?;
    let mut text = w.to_json()?;
    text.push('\n');
    io::write_atomic(out, text.as_bytes())?;
    Ok(losses)
}

/// Validates a pose CSV and, when `out` is given, writes the poses as a
/// trajectory JSON usable as `trajectory.pose_file`.
pub fn cmd_import_poses(csv: &Path, out: Option<&Path>) -> Result<Vec<CameraPose>> {
    let poses: Vec<CameraPose> = io::read_pose_csv(csv)?.into_iter().map(|(_, p)| p).collect();
    if let Some(out) = out {
        io::write_poses_json(out, &poses)?;
    }
    Ok(poses)
}
