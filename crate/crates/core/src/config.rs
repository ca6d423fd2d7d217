//! Declarative run configuration.
//!
//! A run is described by one TOML file. A size preset supplies the model
//! architecture and the two-phase training schedule; explicit `[model]`,
//! `[train]` or `[finetune]` sections replace the preset's choice wholesale.
//! The resolved training-relevant portion is fingerprinted so checkpoints
//! can refuse to resume under a different configuration.

use crate::data::SceneSpec;
use crate::loss::LossWeights;
use crate::model::ModelConfig;
use crate::postproc::PnmsConfig;
use crate::train::{ReweightSettings, TrainSettings};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config {path}: {source}")]
    Parse {
        path: String,
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Model-size presets. `desk` is sized for CPU runs and tests; `small` and
/// `base` mirror the full-scale reference schedules and are impractical to
/// train in this repository.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Small,
    Base,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::default(),
            Preset::Small => ModelConfig {
                backbone_channels: vec![32, 64, 128, 256, 256],
                d_model: 256,
                encoder_layers: 6,
                decoder_layers: 3,
                num_heads: 8,
                ffn_dim: 2048,
                num_queries: 64,
                num_object_classes: 3,
                num_action_classes: 4,
            },
            Preset::Base => ModelConfig {
                backbone_channels: vec![32, 64, 128, 256, 256],
                d_model: 256,
                encoder_layers: 6,
                decoder_layers: 6,
                num_heads: 8,
                ffn_dim: 2048,
                num_queries: 64,
                num_object_classes: 3,
                num_action_classes: 4,
            },
        }
    }

    /// Main-phase schedule. The full-scale presets train for 90 epochs at
    /// 1e-4 with a 10x drop at epoch 60 and weight decay 1e-4.
    pub fn train(self) -> TrainSettings {
        match self {
            Preset::Desk => TrainSettings::default(),
            Preset::Small | Preset::Base => TrainSettings {
                epochs: 90,
                learning_rate: 1e-4,
                lr_drop_epoch: 60,
                lr_drop_factor: 0.1,
                weight_decay: 1e-4,
                batch_size: 16,
                grad_clip: 0.1,
                seed: 0,
            },
        }
    }

    /// Decoupled fine-tuning schedule: 10 epochs at a reduced rate with no
    /// further drop.
    pub fn finetune(self) -> TrainSettings {
        let main = self.train();
        let lr = match self {
            Preset::Desk => 1e-4,
            Preset::Small | Preset::Base => 1e-5,
        };
        TrainSettings {
            epochs: 10,
            learning_rate: lr,
            lr_drop_epoch: 0,
            ..main
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    /// Explicit overrides; when absent the preset supplies the section.
    pub model: Option<ModelConfig>,
    pub train: Option<TrainSettings>,
    pub finetune: Option<TrainSettings>,
    pub loss: LossWeights,
    pub reweight: ReweightSettings,
    pub pnms: PnmsConfig,
    /// Synthetic scene generation parameters for `generate-data`.
    pub data: SceneSpec,
    /// Emit only each query's best action instead of all actions.
    pub argmax_only: bool,
}

/// The preset-resolved, training-relevant view of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub finetune: TrainSettings,
    pub loss: LossWeights,
    pub reweight: ReweightSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: RunConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source: Box::new(source),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.resolved()
            .model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.data
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let r = self.resolved();
        for (name, t) in [("train", &r.train), ("finetune", &r.finetune)] {
            if t.batch_size == 0 {
                return Err(ConfigError::Invalid(format!(
                    "{name}.batch_size must be > 0"
                )));
            }
            if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
                return Err(ConfigError::Invalid(format!(
                    "{name}.learning_rate must be positive"
                )));
            }
            if t.grad_clip <= 0.0 {
                return Err(ConfigError::Invalid(format!(
                    "{name}.grad_clip must be > 0"
                )));
            }
        }
        if self.data.num_object_classes != r.model.num_object_classes
            || self.data.num_action_classes != r.model.num_action_classes
        {
            return Err(ConfigError::Invalid(format!(
                "data vocabulary ({} objects, {} actions) must match the model ({}, {})",
                self.data.num_object_classes,
                self.data.num_action_classes,
                r.model.num_object_classes,
                r.model.num_action_classes
            )));
        }
        Ok(())
    }

    pub fn resolved(&self) -> ResolvedConfig {
        ResolvedConfig {
            model: self.model.clone().unwrap_or_else(|| self.preset.model()),
            train: self.train.clone().unwrap_or_else(|| self.preset.train()),
            finetune: self
                .finetune
                .clone()
                .unwrap_or_else(|| self.preset.finetune()),
            loss: self.loss,
            reweight: self.reweight.clone(),
        }
    }

    /// Hex SHA-256 of the resolved training-relevant configuration.
    /// Post-processing and data-generation settings do not participate, so
    /// they can change between runs that share checkpoints.
    pub fn fingerprint(&self) -> String {
        let canonical =
            serde_json::to_vec(&self.resolved()).expect("config serialization cannot fail");
        let mut hasher = Sha256::new();
        hasher.update(&canonical);
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
