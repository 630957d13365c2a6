//! Declarative run configuration read from TOML.
//!
//! ```toml
//! [backbone]
//! mode = "standin"            # or "pretrained-file" with weights_path
//! taps = [3, 6, 9, 12]
//!
//! [model]
//! variant = "cross-fusion"
//! channels = [64, 128, 256, 512]
//! input_size = 256
//!
//! [loss]
//! lambda_mldp = 1.0
//! taps = [3, 6, 9, 12]
//! perceptual_enabled = true
//!
//! [data]
//! root = "data/pelvis"        # overridden by DGCF_DATA_ROOT
//! task = "mri2ct"
//! size = 256
//! split_seed = 0
//!
//! [train]
//! learning_rate = 2e-4
//! batch_size = 4
//! epochs = 100
//! ```

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::Task;
use crate::error::{config_err, Error, Result};
use crate::evaluation::{default_pelvic_organs, Organ};
use crate::generator::GeneratorConfig;
use crate::losses::LossConfig;
use crate::training::{OptimizerKind, TrainConfig};

/// Environment variable that replaces `data.root`.
pub const DATA_ROOT_ENV: &str = "DGCF_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub root: PathBuf,
    pub task: Task,
    pub size: usize,
    pub split_seed: u64,
    /// Manifest path relative to `root`.
    pub manifest: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            task: Task::Mri2ct,
            size: 256,
            split_seed: 0,
            manifest: PathBuf::from("manifest.csv"),
        }
    }
}

impl DataConfig {
    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(&self.manifest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    #[serde(alias = "lr")]
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub checkpoint_every: usize,
    pub max_steps: Option<usize>,
    pub out_dir: PathBuf,
    pub precision: Precision,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            optimizer: t.optimizer,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            checkpoint_every: t.checkpoint_every,
            max_steps: t.max_steps,
            out_dir: PathBuf::from("runs/default"),
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub organs: Vec<Organ>,
    pub batch_size: usize,
    /// Optional PSNR body mask: only voxels above this HU count.
    pub body_threshold_hu: Option<f32>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            organs: default_pelvic_organs(),
            batch_size: 4,
            body_threshold_hu: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub model: GeneratorConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err!("{e}"))
    }

    /// Reads `path` and applies the data-root environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => config_err!("{}: {m}", path.display()),
            other => other,
        })?;
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
            cfg.data.root = PathBuf::from(root);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config_err!("{e}"))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train_config().validate()?;
        if self.data.size != self.model.input_size {
            return Err(config_err!(
                "data.size = {} differs from model.input_size = {}",
                self.data.size,
                self.model.input_size
            ));
        }
        if self.model.variant.uses_backbone() || self.loss.perceptual_enabled {
            self.backbone.taps.check_against(self.backbone.geometry.block_count)?;
            self.loss.taps.check_against(self.backbone.geometry.block_count)?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            optimizer: t.optimizer,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            checkpoint_every: t.checkpoint_every,
            max_steps: t.max_steps,
            loss: self.loss.clone(),
            model: self.model.clone(),
        }
    }

    /// Whether any part of the run needs the frozen backbone.
    pub fn needs_backbone(&self) -> bool {
        self.model.variant.uses_backbone() || (self.loss.perceptual_enabled && self.loss.lambda_mldp > 0.0)
    }
}
