use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataprep::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::model::ModelConfig;
use crate::synthgen::PlanSpec;
use crate::train::ablation::DEFAULT_ALPHAS;
use crate::train::trainer::{SchedulerConfig, TrainConfig, FINETUNE_LR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { preset: "nano".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub finetune_lr: f64,
    pub seed: u64,
    pub split: f64,
    pub repeats: usize,
    pub deterministic: bool,
    pub scheduler: SchedulerConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
            finetune_lr: FINETUNE_LR,
            seed: t.seed,
            split: t.split,
            repeats: t.repeats,
            deterministic: t.deterministic,
            scheduler: t.scheduler,
        }
    }
}

/// Synthetic pool used when no dataset directory is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub samples: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { samples: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub alphas: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { alphas: DEFAULT_ALPHAS.to_vec() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory with `images/` and `masks/`.
    pub data: Option<PathBuf>,
    /// Where runs write history, checkpoints and reports.
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Everything a command can be configured with, one TOML table per concern.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plan: PlanSpec,
    pub data: DataSection,
    pub augment: AugmentConfig,
    pub model: ModelSection,
    pub loss: LossSpec,
    pub train: TrainSection,
    pub ablation: AblationSection,
    pub paths: Paths,
}

impl RunConfig {
    /// Parse and validate; unknown keys fail with their location.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        ModelConfig::preset(&self.model.preset)?;
        self.train_config().validate()?;
        if !(self.train.finetune_lr >= 0.0 && self.train.finetune_lr.is_finite()) {
            return Err(Error::Config(format!("finetune_lr must be finite and non-negative, got {}", self.train.finetune_lr)));
        }
        if let Some(a) = self.ablation.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::Config(format!("ablation alphas must lie in (0, 1), got {a}")));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch: t.batch,
            lr: t.lr,
            seed: t.seed,
            split: t.split,
            scheduler: t.scheduler.clone(),
            loss: self.loss,
            preset: self.model.preset.clone(),
            repeats: t.repeats,
            augment: self.augment.clone(),
            deterministic: t.deterministic,
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig { lr: self.train.finetune_lr, ..self.train_config() }
    }
}
