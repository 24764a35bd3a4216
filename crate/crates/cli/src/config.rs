//! TOML configuration file. Every section is optional; command-line flags
//! override individual fields.

use std::path::Path;

use anyhow::Context;
use graphreason::datagen::{DatagenConfig, SyntheticKgConfig};
use graphreason::retrieval::RetrievalConfig;
use graphreason::train::{Task, TrainConfig};
use graphreason::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

/// Training overrides; unset fields keep the task defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub eval_interval: Option<usize>,
    pub weight_decay: Option<f64>,
    pub clip_norm: Option<f64>,
    pub tau: Option<f64>,
    /// Retrieval fine-tuning only: negatives sampled per mined hop.
    pub max_negatives: Option<usize>,
}

impl TrainSection {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.eval_interval {
            cfg.eval_interval = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.clip_norm {
            cfg.clip_norm = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// Default seed for every command.
    pub seed: Option<u64>,
    /// `vocab_size` is ignored; it always comes from the data.
    pub model: ModelConfig,
    pub datagen: DatagenConfig,
    pub synthetic: SyntheticKgConfig,
    pub retrieval: RetrievalConfig,
    pub adapt: TrainSection,
    pub finetune_reason: TrainSection,
    pub finetune_retrieve: TrainSection,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: FileConfig = toml::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn train_section(&self, task: Task) -> &TrainSection {
        match task {
            Task::Adapt => &self.adapt,
            Task::FinetuneReason => &self.finetune_reason,
            Task::FinetuneRetrieve => &self.finetune_retrieve,
        }
    }

    /// Task defaults, then the file section, then `flags`.
    pub fn train_config(
        &self,
        task: Task,
        flags: &TrainSection,
        seed: u64,
    ) -> anyhow::Result<TrainConfig> {
        let mut cfg = TrainConfig::for_task(task);
        self.train_section(task).apply(&mut cfg);
        flags.apply(&mut cfg);
        cfg.seed = seed;
        cfg.validate()
            .map_err(|e| UsageError(e.to_string()))
            .context("training configuration")?;
        Ok(cfg)
    }
}
