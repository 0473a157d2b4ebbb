use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::regnet::RegNetConfig;
use crate::tensor::AdamConfig;

/// Parse a TOML document, reporting the offending key as a config error.
pub fn parse_toml<C: DeserializeOwned>(text: &str) -> Result<C> {
    toml::from_str(text).map_err(|e| {
        let message = e.message().to_string();
        let field = message
            .split('`')
            .nth(1)
            .map(str::to_string)
            .or_else(|| e.span().map(|s| text[s].trim().to_string()))
            .unwrap_or_else(|| "<document>".into());
        Error::Config { field, message }
    })
}

pub fn load_toml<C: DeserializeOwned>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_toml(&text)
}

pub fn save_toml<C: Serialize>(path: &Path, value: &C) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Pairs per optimizer step.
    pub batch_size: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub grad_surgery: bool,
    /// Epochs between `last` checkpoints.
    pub checkpoint_every: usize,
    /// Epochs between validation passes.
    pub validate_every: usize,
    pub precision: Precision,
    pub optimizer: AdamConfig,
    pub model: RegNetConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 100,
            batch_size: 1,
            max_steps: None,
            grad_surgery: true,
            checkpoint_every: 1,
            validate_every: 1,
            precision: Precision::F32,
            optimizer: AdamConfig::default(),
            model: RegNetConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| Err(Error::Config { field: field.into(), message: message.into() });
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be >= 1");
        }
        if self.validate_every == 0 {
            return bad("validate_every", "must be >= 1");
        }
        if !(self.optimizer.lr > 0.0) {
            return bad("optimizer.lr", "must be > 0");
        }
        if !(0.0..1.0).contains(&self.optimizer.beta1) {
            return bad("optimizer.beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.optimizer.beta2) {
            return bad("optimizer.beta2", "must lie in [0, 1)");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps", "must be >= 1");
        }
        self.model.validate()?;
        self.loss.validate()
    }

    /// Disable the feature extractor; the contrastive term goes with it.
    pub fn without_feature_extractor(mut self) -> Self {
        self.model.feature_extractor = false;
        self.loss.lambda_c = 0.0;
        self
    }
}
