//! Scenario configuration: one JSON file with nested blocks. Unknown keys
//! are rejected and errors name the offending key path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MaskMode;
use crate::pipeline::PipelineConfig;
use crate::sim::{NoiseConfig, RoomConfig, TrajectoryConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    #[default]
    Noisy,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub map_file: String,
    pub metrics_file: String,
    pub trace_file: String,
    pub ablation_file: String,
    /// Adds `p0..p{N-1}` columns to the map dump.
    pub dump_probs: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            map_file: "map.csv".into(),
            metrics_file: "metrics.json".into(),
            trace_file: "trace.csv".into(),
            ablation_file: "ablation.csv".into(),
            dump_probs: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub mask: MaskMode,
}

/// Fusion-MLP training on simulated episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    /// Added to every seed so training episodes differ from evaluation ones.
    pub seed_offset: u64,
    /// Random temporal pairs kept per frame.
    pub pairs_per_frame: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 4,
            seed_offset: 10_000,
            pairs_per_frame: 256,
            batch_size: 256,
            learning_rate: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.batch_size == 0 || self.pairs_per_frame == 0 {
            return Err(Error::invalid("episodes, pairs_per_frame and batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Scene generation seed.
    pub seed: u64,
    pub scene: RoomConfig,
    pub trajectory: TrajectoryConfig,
    pub predictor: PredictorKind,
    pub noise: NoiseConfig,
    pub pipeline: PipelineConfig,
    pub metrics: MetricsConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

impl ScenarioConfig {
    /// Parses JSON text; relative paths stay relative.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Config {
                path,
                message: format!("{inner}"),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output.dir);
        if let Some(p) = self.trajectory.pose_file.as_mut() {
            fix(p);
        }
        if let Some(p) = self.pipeline.mlp_weights_path.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let tag = |block: &'static str| move |e: Error| Error::Config {
            path: block.to_string(),
            message: e.to_string(),
        };
        self.scene.validate().map_err(tag("scene"))?;
        self.trajectory.validate().map_err(tag("trajectory"))?;
        self.noise.validate().map_err(tag("noise"))?;
        self.pipeline.validate().map_err(tag("pipeline"))?;
        self.train.validate().map_err(tag("train"))?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Shifts every seed by `offset`, for repeated episodes.
    pub fn with_seed_offset(&self, offset: u64) -> Self {
        let mut c = self.clone();
        c.seed = c.seed.wrapping_add(offset);
        c.trajectory.seed = c.trajectory.seed.wrapping_add(offset);
        c.noise.seed = c.noise.seed.wrapping_add(offset);
        c.pipeline.seed = c.pipeline.seed.wrapping_add(offset);
        c
    }

    pub fn map_path(&self) -> PathBuf {
        self.output.dir.join(&self.output.map_file)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output.dir.join(&self.output.metrics_file)
    }

    pub fn trace_path(&self) -> PathBuf {
        self.output.dir.join(&self.output.trace_file)
    }

    pub fn ablation_path(&self) -> PathBuf {
        self.output.dir.join(&self.output.ablation_file)
    }
}
