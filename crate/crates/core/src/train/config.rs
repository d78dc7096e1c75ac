use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::SyntheticSpec;
use crate::error::{Result, ZigmaError};
use crate::interpolant::{InterpolantSchedule, ObjectiveRegistry};
use crate::model::{Conditioning, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Global gradient-norm threshold.
    #[serde(default = "default_clip")]
    pub clip: f64,
    /// EMA rate of the shadow weights.
    #[serde(default = "default_ema")]
    pub ema: f64,
    pub batch: usize,
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    /// Linear learning-rate warmup length.
    #[serde(default)]
    pub warmup: u64,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_clip() -> f64 {
    2.0
}
fn default_ema() -> f64 {
    0.9999
}

impl OptimizerConfig {
    pub fn new(batch: usize, steps: u64) -> Self {
        OptimizerConfig {
            lr: default_lr(),
            weight_decay: 0.0,
            clip: default_clip(),
            ema: default_ema(),
            batch,
            steps,
            seed: 0,
            warmup: 0,
        }
    }

    /// Learning rate at `step` (zero-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup == 0 || step >= self.warmup {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default = "default_schedule")]
    pub schedule: String,
    #[serde(default = "default_objective")]
    pub objective: String,
    pub optimizer: OptimizerConfig,
    pub dataset: SyntheticSpec,
    pub out_dir: PathBuf,
    /// Steps between metric lines and between checkpoints.
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default = "default_ckpt_every")]
    pub checkpoint_every: u64,
}

fn default_schedule() -> String {
    "linear".into()
}
fn default_objective() -> String {
    "velocity".into()
}
fn default_log_every() -> u64 {
    10
}
fn default_ckpt_every() -> u64 {
    500
}

impl RunConfig {
    /// A small runnable configuration on an 8×8 Gaussian field.
    pub fn example(out_dir: impl Into<PathBuf>) -> Self {
        let mut model = ModelConfig::tiny(2, 32, 1, 8, 8);
        model.d_state = 8;
        RunConfig {
            model,
            schedule: default_schedule(),
            objective: default_objective(),
            optimizer: OptimizerConfig::new(16, 200),
            dataset: SyntheticSpec::gaussian_field(1, 8, 8, 0.5, 0.8),
            out_dir: out_dir.into(),
            log_every: default_log_every(),
            checkpoint_every: default_ckpt_every(),
        }
    }

    pub fn schedule(&self) -> Result<InterpolantSchedule> {
        InterpolantSchedule::by_name(&self.schedule)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dataset.validate()?;
        self.schedule()?;
        ObjectiveRegistry::builtin().get(&self.objective)?;
        let o = &self.optimizer;
        if o.batch == 0 {
            return Err(ZigmaError::Config("optimizer.batch must be positive".into()));
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) || o.weight_decay < 0.0 || o.clip <= 0.0 || !(0.0..1.0).contains(&o.ema) {
            return Err(ZigmaError::Config("optimizer values out of range".into()));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(ZigmaError::Config("log_every and checkpoint_every must be positive".into()));
        }
        let m = &self.model;
        let d = &self.dataset;
        if (m.channels, m.height, m.width) != (d.channels, d.height, d.width) {
            return Err(ZigmaError::Config(format!(
                "dataset dims {:?} differ from model dims {:?}",
                (d.channels, d.height, d.width),
                (m.channels, m.height, m.width)
            )));
        }
        if m.conditioning != Conditioning::None && d.n_classes > m.n_classes {
            return Err(ZigmaError::Config(format!(
                "dataset has {} classes but the model embeds {}",
                d.n_classes, m.n_classes
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
