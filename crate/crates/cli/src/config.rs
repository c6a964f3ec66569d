//! Declarative run configuration (TOML) and the config hash recorded in
//! every output artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tinytrain_core::error::{Error, Result};
use tinytrain_core::graph::BackboneConfig;
use tinytrain_core::sparse::{Ratio, UpdateScheme, WeightUpdate};
use tinytrain_core::train::{LrSchedule, OptimKind, OptimizerConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default)]
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub scheme: Option<SchemeSection>,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub search: SearchSection,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    pub classes: usize,
    /// Weight-initialization seed; defaults to the run seed.
    #[serde(default)]
    pub init_seed: Option<u64>,
}

fn default_blocks() -> usize {
    2
}
fn default_width() -> usize {
    8
}
fn default_resolution() -> usize {
    8
}

impl ModelSection {
    pub fn backbone(&self) -> Result<BackboneConfig> {
        match self.preset.as_str() {
            "toy" => Ok(BackboneConfig::toy(
                self.blocks,
                self.width,
                self.classes,
                self.resolution,
            )),
            "mbv2-w035" => Ok(BackboneConfig::mbv2_w035(self.classes)),
            "mcunet5fps" => Ok(BackboneConfig::mcunet5fps_like(self.classes)),
            other => Err(Error::Config(format!(
                "unknown model preset {other:?} (expected toy | mbv2-w035 | mcunet5fps)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// shard | class-dirs | synthetic-teacher | synthetic-blobs
    pub source: String,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub teacher_seed: u64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_samples() -> usize {
    96
}
fn default_val_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    pub bias_depth_k: usize,
    #[serde(default)]
    pub weights: Vec<WeightEntry>,
    #[serde(default = "default_true")]
    pub classifier_trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightEntry {
    pub layer: usize,
    pub ratio: Ratio,
}

fn default_true() -> bool {
    true
}

impl SchemeSection {
    pub fn to_scheme(&self) -> UpdateScheme {
        UpdateScheme {
            bias_depth_k: self.bias_depth_k,
            weight_updates: self
                .weights
                .iter()
                .map(|w| WeightUpdate {
                    layer: w.layer,
                    ratio: w.ratio,
                })
                .collect(),
            classifier_trainable: self.classifier_trainable,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// constant | cosine
    #[serde(default = "default_schedule")]
    pub schedule: String,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_true")]
    pub qas: bool,
    #[serde(default = "default_accumulation")]
    pub accumulation: usize,
    #[serde(default)]
    pub weight_decay: f64,
    /// sgd | adam | lars
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Per-tensor L2 gradient cap; 0 disables clipping.
    #[serde(default)]
    pub grad_clip: f64,
}

fn default_lr() -> f64 {
    0.05
}
fn default_schedule() -> String {
    "constant".into()
}
fn default_accumulation() -> usize {
    1
}
fn default_kind() -> String {
    "sgd".into()
}
fn default_epochs() -> usize {
    5
}

impl Default for OptimizerSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl OptimizerSection {
    pub fn to_config(&self) -> Result<OptimizerConfig> {
        let schedule = match self.schedule.as_str() {
            "constant" => LrSchedule::Constant,
            "cosine" => LrSchedule::CosineWarmup {
                warmup_epochs: self.warmup_epochs,
            },
            other => return Err(Error::Config(format!("unknown lr schedule {other:?}"))),
        };
        let kind = match self.kind.as_str() {
            "sgd" => OptimKind::Sgd,
            "adam" => OptimKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            "lars" => OptimKind::Lars { trust: 0.001 },
            other => return Err(Error::Config(format!("unknown optimizer kind {other:?}"))),
        };
        let cfg = OptimizerConfig {
            lr: self.lr,
            schedule,
            momentum: self.momentum,
            qas_enabled: self.qas,
            grad_accumulation_steps: self.accumulation,
            weight_decay: self.weight_decay,
            kind,
            epochs: self.epochs,
            grad_clip: if self.grad_clip > 0.0 { Some(self.grad_clip) } else { None },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    #[serde(default = "default_population")]
    pub population: usize,
    #[serde(default = "default_generations")]
    pub generations: usize,
    #[serde(default = "default_mutation")]
    pub mutation_prob: f64,
    #[serde(default = "default_parents")]
    pub parents: usize,
    #[serde(default)]
    pub budget_bytes: Option<u64>,
    #[serde(default = "default_probe_epochs")]
    pub probe_epochs: usize,
    #[serde(default = "default_probe_lr")]
    pub probe_lr: f64,
    /// Optional path to a previously measured contribution table.
    #[serde(default)]
    pub table: Option<PathBuf>,
}

fn default_population() -> usize {
    32
}
fn default_generations() -> usize {
    64
}
fn default_mutation() -> f64 {
    0.3
}
fn default_parents() -> usize {
    8
}
fn default_probe_epochs() -> usize {
    2
}
fn default_probe_lr() -> f64 {
    0.1
}

impl Default for SearchSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

/// A parsed configuration plus the hash recorded in every artifact.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub hash: String,
    pub seed: u64,
}

pub fn load_config(path: &Path, seed_override: Option<u64>) -> Result<LoadedConfig> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let config: RunConfig = toml::from_str(
        std::str::from_utf8(&bytes).map_err(|e| Error::Config(format!("config not utf-8: {e}")))?,
    )
    .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    if config.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "unsupported config schema_version {}",
            config.schema_version
        )));
    }
    let seed = seed_override.unwrap_or(config.seed);
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    hasher.update(seed.to_le_bytes());
    let hash = format!("{:x}", hasher.finalize());
    Ok(LoadedConfig { config, hash, seed })
}
