//! Run configuration: a TOML file with `model`, `train`, `data`, and
//! `inference` sections. Every field has a default, so an empty file is a
//! valid full-scale-training recipe scaled down only where the file says so.
//!
//! Dotted keys (`model.base_filters = 16`) and table headers (`[model]`)
//! both work; they parse to the same structure.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::optim::Schedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Initial learning rate; decays as alpha0 * (1 - e/epochs)^power.
    pub alpha0: f64,
    pub power: f64,
    /// Weight of the reconstruction term in the total loss.
    pub w_l2: f32,
    /// Weight of the KL term in the total loss.
    pub w_kl: f32,
    /// L2 penalty on conv kernels, coupled into the Adam gradient.
    pub weight_decay: f32,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (and always at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            alpha0: 1e-4,
            power: 0.9,
            w_l2: 0.1,
            w_kl: 0.1,
            weight_decay: 1e-5,
            seed: 0,
            checkpoint_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Average predictions over all eight axis-flip variants.
    pub tta: bool,
    /// Checkpoints to ensemble; may be overridden on the command line.
    pub checkpoints: Vec<PathBuf>,
    /// Per-channel probability cut used when decoding labels.
    pub threshold: f32,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { tta: false, checkpoints: Vec::new(), threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub inference: InferenceConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if !(t.alpha0 > 0.0) {
            return Err(Error::Config("train.alpha0 must be positive".into()));
        }
        if !(t.power >= 0.0) {
            return Err(Error::Config("train.power must be non-negative".into()));
        }
        for (name, v) in [("w_l2", t.w_l2), ("w_kl", t.w_kl), ("weight_decay", t.weight_decay)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("train.{name} must be finite and >= 0")));
            }
        }
        if t.checkpoint_every == 0 {
            return Err(Error::Config("train.checkpoint_every must be at least 1".into()));
        }
        let tau = self.inference.threshold;
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Config(format!(
                "inference.threshold must lie in (0, 1), got {tau}"
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            alpha0: self.train.alpha0,
            total_epochs: self.train.epochs,
            power: self.train.power,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { w_l2: self.train.w_l2, w_kl: self.train.w_kl, ..LossWeights::default() }
    }

    /// Full configuration after defaulting, for logging alongside a run.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
