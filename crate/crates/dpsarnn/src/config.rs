//! TOML run configuration with `[model]` and `[train]` tables.
//!
//! Omitted keys take their defaults, which describe the causal 6-block
//! model and the 15-epoch schedule. Unknown keys are rejected.

use std::path::Path;

use anyhow::Context;
use dpsarnn_core::dualpath::ModelConfig;
use dpsarnn_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("invalid configuration")?;
        cfg.model.validate().context("invalid [model] section")?;
        cfg.train.validate().context("invalid [train] section")?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }
}
