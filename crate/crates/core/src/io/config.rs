use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::load_json;
use crate::error::{Error, Result};
use crate::loss_metrics::LossConfig;
use crate::shape_synth::ElasticConfig;
use crate::symtc_net::{AdamConfig, NetworkConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm limit; null disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_batch() -> usize {
    4
}
fn default_epochs() -> usize {
    500
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            clip_norm: default_clip(),
            batch_size: default_batch(),
            epochs: default_epochs(),
        }
    }
}

impl OptimizerConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_norm: self.clip_norm,
        }
    }
}

/// On-the-fly training augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Elastic deformation applied to every training sample; null disables it.
    #[serde(default)]
    pub elastic: Option<ElasticConfig>,
    /// Random translation up to this many pixels along each axis.
    #[serde(default = "default_shift")]
    pub max_shift: usize,
}

fn default_shift() -> usize {
    16
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            elastic: None,
            max_shift: default_shift(),
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn off() -> Self {
        Self {
            elastic: None,
            max_shift: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Parameter initialization.
    #[serde(default)]
    pub init: u64,
    /// Batch order and augmentation draws.
    #[serde(default = "one")]
    pub data: u64,
}

fn one() -> u64 {
    1
}

impl Default for Seeds {
    fn default() -> Self {
        Self { init: 0, data: 1 }
    }
}

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    /// Defaults to equal dice/CE weights for the network's class count.
    #[serde(default)]
    pub loss: Option<LossConfig>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub augmentation: AugmentConfig,
    #[serde(default)]
    pub seeds: Seeds,
    /// Training-set DSC is logged every this many epochs (0 = never).
    #[serde(default = "one_usize")]
    pub dsc_every: usize,
}

fn one_usize() -> usize {
    1
}

impl RunConfig {
    pub fn new(network: NetworkConfig) -> Self {
        Self {
            network,
            loss: None,
            optimizer: OptimizerConfig::default(),
            augmentation: AugmentConfig::default(),
            seeds: Seeds::default(),
            dsc_every: 1,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        self.loss.clone().unwrap_or_else(|| LossConfig::new(self.network.class_count))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let loss = self.loss_config();
        loss.validate()?;
        if loss.class_count != self.network.class_count {
            return Err(Error::Config(format!(
                "loss.class_count {} differs from network.class_count {}",
                loss.class_count, self.network.class_count
            )));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || o.batch_size == 0 || o.epochs == 0 {
            return Err(Error::Config(format!(
                "optimizer needs lr > 0, batch_size ≥ 1, epochs ≥ 1 (got {}, {}, {})",
                o.lr, o.batch_size, o.epochs
            )));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return Err(Error::Config(format!("adam betas ({}, {}) or eps {} out of range", o.beta1, o.beta2, o.eps)));
        }
        if matches!(o.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("optimizer.clip_norm must be positive or null".into()));
        }
        if let Some(e) = &self.augmentation.elastic {
            e.validate()?;
        }
        let size = self.network.height.min(self.network.width);
        if self.augmentation.max_shift >= size {
            return Err(Error::Config(format!(
                "augmentation.max_shift {} not below image size {size}",
                self.augmentation.max_shift
            )));
        }
        Ok(())
    }

    /// Parses, rejecting unknown keys, then validates.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = load_json(path)?;
        cfg.validate().map_err(|e| e.in_file(path))?;
        Ok(cfg)
    }
}

/// JSON Schema of [`RunConfig`].
pub fn run_config_schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(RunConfig)).expect("schema serializes")
}
