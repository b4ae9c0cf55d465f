//! Run configuration: one TOML document with a section per concern.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentationConfig, DEFAULT_SIGMA};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;

/// Ground-truth construction and dataset splitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Gaussian kernel σ in pixels.
    pub sigma: f64,
    /// Rescale each head's truncated kernel to unit in-image mass.
    pub renormalize: bool,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            renormalize: true,
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Factor applied to density targets during training.
    pub density_scale: f64,
    /// Write a checkpoint every this many epochs (the final epoch is always written).
    pub checkpoint_every: usize,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    /// Fraction of steps spent warming up to `max_lr`.
    pub warmup_fraction: f64,
    /// Initial learning rate is `max_lr / div_factor`.
    pub div_factor: f64,
    /// Final learning rate is `max_lr / final_div_factor`.
    pub final_div_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 16,
            max_lr: 1e-3,
            weight_decay: 1e-4,
            seed: 2023,
            density_scale: 1000.0,
            checkpoint_every: 10,
            grad_clip: 0.0,
            warmup_fraction: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }
}

impl TrainConfig {
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs == 0 {
            out.push("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            out.push("train.batch_size must be at least 1".into());
        }
        for (k, v) in [
            ("max_lr", self.max_lr),
            ("density_scale", self.density_scale),
            ("div_factor", self.div_factor),
            ("final_div_factor", self.final_div_factor),
        ] {
            if !(v.is_finite() && v > 0.0) {
                out.push(format!("train.{k} = {v} must be positive"));
            }
        }
        for (k, v) in [("weight_decay", self.weight_decay), ("grad_clip", self.grad_clip)] {
            if !(v.is_finite() && v >= 0.0) {
                out.push(format!("train.{k} = {v} must be non-negative"));
            }
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            out.push(format!("train.warmup_fraction = {} must lie in (0, 1)", self.warmup_fraction));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Also write per-image counts as CSV next to the JSON report.
    pub csv: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { csv: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub augment: AugmentationConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (known.get(k), v) {
            (None, _) => out.push(format!("unknown key `{path}`")),
            (Some(toml::Value::Table(kt)), toml::Value::Table(gt)) => unknown_keys(gt, kt, &path, out),
            _ => {}
        }
    }
}

impl RunConfig {
    /// Parse TOML; every unknown key and every invalid value is reported.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let given: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        let known = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        let mut problems = Vec::new();
        unknown_keys(&given, &known, "", &mut problems);
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(items) => Error::Config(items.into_iter().map(|i| format!("{}: {i}", path.display())).collect()),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_toml_string().as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.data.sigma.is_finite() && self.data.sigma > 0.0) {
            out.push(format!("data.sigma = {} must be positive", self.data.sigma));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            out.push(format!("data.train_fraction = {} must lie in (0, 1)", self.data.train_fraction));
        }
        out.extend(self.augment.issues());
        out.extend(self.model.issues());
        out.extend(self.loss.issues());
        out.extend(self.train.issues());
        if self.model.patch_size > 0 && !self.augment.crop_size.is_multiple_of(self.model.patch_size) {
            out.push(format!(
                "augment.crop_size = {} must be a multiple of model.patch_size = {}",
                self.augment.crop_size, self.model.patch_size
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }
}
