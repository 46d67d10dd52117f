//! JSON experiment configuration: model, data, training and strategy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticDatasetSpec;
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::StrategyKind;
use crate::model::Architecture;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Preset name (`toy`, `tiny`, `small`) the `model` overrides apply to.
    pub preset: Option<String>,
    pub model: ModelConfig,
    pub data: SyntheticDatasetSpec,
    pub train: TrainConfig,
    pub strategy: StrategyKind,
    pub arch: Architecture,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: None,
            model: ModelConfig::toy(),
            data: SyntheticDatasetSpec::default(),
            train: TrainConfig::default(),
            strategy: StrategyKind::Average,
            arch: Architecture::Fused,
            init_seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Parses JSON. When `preset` is set, keys given under `model` override
    /// the preset's values; absent keys keep them.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let mut cfg: ExperimentConfig = serde_json::from_value(raw.clone())?;
        if let Some(name) = &cfg.preset {
            let base = ModelConfig::preset(name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown preset {name:?}")))?;
            let mut merged = serde_json::to_value(base)?;
            if let (Some(dst), Some(src)) = (
                merged.as_object_mut(),
                raw.get("model").and_then(|m| m.as_object()),
            ) {
                for (k, v) in src {
                    dst.insert(k.clone(), v.clone());
                }
            }
            cfg.model = serde_json::from_value(merged)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Model/data consistency; training limits are checked once the split
    /// size is known.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        let m = &self.model;
        let d = &self.data;
        if (m.frames, m.height, m.width) != (d.frames, d.height, d.width) {
            return Err(Error::InvalidConfig(format!(
                "model expects {}×{}×{} clips, data produces {}×{}×{}",
                m.frames, m.height, m.width, d.frames, d.height, d.width
            )));
        }
        if m.num_classes != d.num_classes {
            return Err(Error::InvalidConfig(format!(
                "model has {} classes, data has {}",
                m.num_classes, d.num_classes
            )));
        }
        Ok(())
    }
}
