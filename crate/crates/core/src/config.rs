//! Structured configuration covering every tunable in the pipeline.
//! Serialized as TOML with one section per subsystem.

use crate::backbone::BackboneConfig;
use crate::data::SynthConfig;
use crate::matcher::LossConfig;
use crate::mefl::MeflConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Optimizer and loop settings.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Evaluate every this many steps; 0 means at each epoch end.
    pub eval_every: usize,
    /// Side of the training crops taken from full SAR scenes.
    pub template_size: usize,
    /// Stop once held-out CMR(1) reaches this value, if set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop_cmr1: Option<f64>,
    pub device: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            weight_decay: 0.0,
            batch_size: 4,
            epochs: 10,
            eval_every: 0,
            template_size: 48,
            early_stop_cmr1: None,
            device: "cpu".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.lr <= 0.0 {
            return Err(ConfigError::Invalid("lr must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(ConfigError::Invalid("batch_size must be >= 1".into()));
        }
        if self.device != "cpu" {
            return Err(ConfigError::Invalid(format!(
                "unsupported device {:?}; only \"cpu\" is built",
                self.device
            )));
        }
        Ok(())
    }
}

/// Noise-sweep settings.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RobustnessConfig {
    /// Gaussian noise variances as percent of unit range.
    pub variances: Vec<f64>,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            variances: vec![2.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
        }
    }
}

/// The full pipeline configuration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub mefl: MeflConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: SynthConfig,
    #[serde(default)]
    pub robustness: RobustnessConfig,
}

impl PipelineConfig {
    /// Desk-scale preset: tiny backbone, two experts, 64/48 synthetic pairs.
    pub fn tiny() -> Self {
        PipelineConfig {
            seed: 0,
            backbone: BackboneConfig::tiny(),
            mefl: MeflConfig {
                n_experts: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backbone
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.loss
            .validate()
            .map_err(ConfigError::Invalid)?;
        self.train.validate()?;
        self.data
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.mefl.n_experts < 1 {
            return Err(ConfigError::Invalid("n_experts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = toml::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text)?;
        Ok(())
    }
}
