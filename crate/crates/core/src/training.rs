//! Training loop, line-delimited logging and generator checkpoints.
//!
//! Only generator parameters are optimized. The backbone holds plain
//! tensors, so it never enters the optimizer and its checksum is verified
//! at every epoch boundary.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer as _, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{parameter_checksum, BackboneHandle};
use crate::data::{PairedDataset, SlicePairs};
use crate::error::{config_err, contract_err, Error, Result};
use crate::generator::{build_generator, BuildOptions, DgcnModel, GeneratorConfig};
use crate::losses::{l1_loss, total_loss, LossBreakdown, LossConfig};
use crate::nn::{scalar_f64, Mode};

pub const CHECKPOINT_FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

/// Keys map to `train.*` (plus the `loss` and `model` sections) in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(alias = "lr")]
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Write `epoch_<n>.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub loss: LossConfig,
    pub model: GeneratorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 4,
            epochs: 100,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 10,
            max_steps: None,
            loss: LossConfig::default(),
            model: GeneratorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(config_err!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(config_err!("epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(config_err!("invalid Adam hyperparameters"));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        l1: f64,
        mldp: f64,
        total: f64,
        elapsed_s: f64,
    },
    Epoch {
        epoch: usize,
        step: usize,
        train_l1: f64,
        val_l1: Option<f64>,
        elapsed_s: f64,
    },
    Checkpoint {
        step: usize,
        epoch: usize,
        path: PathBuf,
        tag: String,
    },
    Abort {
        step: usize,
        epoch: usize,
        l1: f64,
        mldp: f64,
        total: f64,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub wall_clock_s: f64,
    pub checkpoints: Vec<PathBuf>,
    pub best_val_l1: Option<f64>,
}

impl TrainLog {
    pub fn steps(&self) -> impl Iterator<Item = (usize, LossBreakdown)> + '_ {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step { step, l1, mldp, total, .. } => Some((
                *step,
                LossBreakdown {
                    l1: *l1,
                    mldp: *mldp,
                    total: *total,
                },
            )),
            _ => None,
        })
    }

    /// Reads a line-delimited log written by [`Trainer`].
    pub fn read_jsonl(path: &Path) -> Result<Vec<LogRecord>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub step: usize,
    pub loss: LossBreakdown,
}

/// Owns the model and optimizer for one run.
pub struct Trainer {
    model: DgcnModel,
    loss_backbone: Option<Arc<BackboneHandle>>,
    cfg: TrainConfig,
    opt: AdamW,
    step: usize,
    epoch: usize,
    backbone_checksum: Option<String>,
    grad_seen: BTreeSet<String>,
    log: TrainLog,
    sink: Option<BufWriter<File>>,
    started: Instant,
}

impl Trainer {
    /// `loss_backbone` feeds the perceptual term; when `None` the model's
    /// own backbone is used.
    pub fn new(model: DgcnModel, loss_backbone: Option<Arc<BackboneHandle>>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if &cfg.model != model.config() {
            return Err(config_err!("train config model section differs from the built model"));
        }
        let loss_backbone = loss_backbone.or_else(|| model.backbone().cloned());
        if cfg.loss.perceptual_enabled {
            let bb = loss_backbone
                .as_ref()
                .ok_or_else(|| config_err!("perceptual loss enabled but no backbone available"))?;
            cfg.loss.taps.check_against(bb.block_count())?;
        }
        let backbone_checksum = match model.backbone().or(loss_backbone.as_ref()) {
            Some(bb) => Some(parameter_checksum(bb)?),
            None => None,
        };
        let params = ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: 0.0,
        };
        let opt = AdamW::new(model.store().trainable_vars(), params)?;
        Ok(Self {
            model,
            loss_backbone,
            cfg,
            opt,
            step: 0,
            epoch: 0,
            backbone_checksum,
            grad_seen: BTreeSet::new(),
            log: TrainLog::default(),
            sink: None,
            started: Instant::now(),
        })
    }

    /// Appends every log record to `path` as one JSON object per line.
    pub fn log_to(&mut self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::options()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.sink = Some(BufWriter::new(f));
        Ok(())
    }

    fn record(&mut self, r: LogRecord) -> Result<()> {
        if let Some(sink) = &mut self.sink {
            let line = serde_json::to_string(&r)?;
            writeln!(sink, "{line}").and_then(|_| sink.flush()).map_err(|e| Error::io("train log", e))?;
        }
        self.log.records.push(r);
        Ok(())
    }

    pub fn model(&self) -> &DgcnModel {
        &self.model
    }

    pub fn into_model(self) -> DgcnModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Names of trainable parameters that have received a gradient so far.
    pub fn params_with_grad(&self) -> &BTreeSet<String> {
        &self.grad_seen
    }

    /// Trainable parameters that never received a gradient.
    pub fn params_without_grad(&self) -> Vec<String> {
        self.model
            .store()
            .params()
            .keys()
            .filter(|k| !self.grad_seen.contains(*k))
            .cloned()
            .collect()
    }

    /// Errors if any backbone tensor changed since construction.
    pub fn verify_backbone(&self) -> Result<()> {
        if let (Some(expected), Some(bb)) = (&self.backbone_checksum, self.model.backbone().or(self.loss_backbone.as_ref())) {
            let now = parameter_checksum(bb)?;
            if &now != expected {
                return Err(contract_err!("backbone parameters changed during training"));
            }
        }
        Ok(())
    }

    /// One optimizer step on a `[B, 1, S, S]` batch.
    pub fn step(&mut self, source: &Tensor, target: &Tensor) -> Result<StepOutcome> {
        let pred = self.model.forward(source, Mode::Train)?;
        let terms = total_loss(&pred, target, self.loss_backbone.as_deref(), &self.cfg.loss)?;
        let b = terms.breakdown;
        let step = self.step + 1;
        if !b.is_finite() {
            self.record(LogRecord::Abort {
                step,
                epoch: self.epoch,
                l1: b.l1,
                mldp: b.mldp,
                total: b.total,
            })?;
            return Err(Error::NonFiniteLoss {
                step,
                epoch: self.epoch,
                l1: b.l1,
                mldp: b.mldp,
            });
        }
        let grads = terms.total.backward()?;
        for (name, var) in self.model.store().params() {
            if !self.grad_seen.contains(name) && grads.get(var.as_tensor()).is_some() {
                self.grad_seen.insert(name.clone());
            }
        }
        self.opt.step(&grads)?;
        self.step = step;
        let elapsed_s = self.started.elapsed().as_secs_f64();
        self.record(LogRecord::Step {
            step,
            epoch: self.epoch,
            l1: b.l1,
            mldp: b.mldp,
            total: b.total,
            elapsed_s,
        })?;
        Ok(StepOutcome { step, loss: b })
    }

    /// Mean per-slice L1 over `pairs` in eval mode.
    pub fn evaluate_l1(&self, pairs: &SlicePairs) -> Result<f64> {
        mean_l1(&self.model, pairs, self.cfg.batch_size)
    }

    fn budget_left(&self) -> bool {
        self.cfg.max_steps.map(|m| self.step < m).unwrap_or(true)
    }

    /// Slice order for `epoch`, drawn from the run seed with the epoch as
    /// the stream id.
    pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Runs the remaining epochs. With `out_dir`, writes periodic,
    /// best-validation and final checkpoints there.
    pub fn fit(&mut self, train: &SlicePairs, val: Option<&SlicePairs>, out_dir: Option<&Path>) -> Result<TrainLog> {
        if train.is_empty() {
            return Err(contract_err!("training set has no slices"));
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let (dtype, device) = (self.model.dtype(), self.model.device().clone());
        while self.epoch < self.cfg.epochs && self.budget_left() {
            let order = Self::epoch_order(self.cfg.seed, self.epoch, train.len());
            let mut sum = 0.0;
            let mut count = 0usize;
            for idx in order.chunks(self.cfg.batch_size) {
                if !self.budget_left() {
                    break;
                }
                let (x, y) = train.batch(idx, dtype, &device)?;
                let out = self.step(&x, &y)?;
                sum += out.loss.l1 * idx.len() as f64;
                count += idx.len();
            }
            self.verify_backbone()?;
            let val_l1 = match val {
                Some(v) if !v.is_empty() => Some(self.evaluate_l1(v)?),
                _ => None,
            };
            let finished = self.epoch + 1;
            self.record(LogRecord::Epoch {
                epoch: self.epoch,
                step: self.step,
                train_l1: sum / count.max(1) as f64,
                val_l1,
                elapsed_s: self.started.elapsed().as_secs_f64(),
            })?;
            self.epoch = finished;
            if let Some(dir) = out_dir {
                if let Some(v) = val_l1 {
                    if self.log.best_val_l1.map(|b| v < b).unwrap_or(true) {
                        self.log.best_val_l1 = Some(v);
                        self.checkpoint(&dir.join("best.ckpt"), "best")?;
                    }
                }
                if self.cfg.checkpoint_every > 0 && finished % self.cfg.checkpoint_every == 0 {
                    self.checkpoint(&dir.join(format!("epoch_{finished:04}.ckpt")), "periodic")?;
                }
            } else if let Some(v) = val_l1 {
                if self.log.best_val_l1.map(|b| v < b).unwrap_or(true) {
                    self.log.best_val_l1 = Some(v);
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint(&dir.join("final.ckpt"), "final")?;
        }
        self.log.wall_clock_s = self.started.elapsed().as_secs_f64();
        Ok(self.log.clone())
    }

    fn checkpoint(&mut self, path: &Path, tag: &str) -> Result<()> {
        save_checkpoint_at(&self.model, path, self.epoch, self.step)?;
        self.log.checkpoints.push(path.to_path_buf());
        self.record(LogRecord::Checkpoint {
            step: self.step,
            epoch: self.epoch,
            path: path.to_path_buf(),
            tag: tag.to_string(),
        })
    }

    /// Continues from a checkpoint written by this trainer's configuration.
    /// Weights, batch-norm statistics and the epoch/step counters are
    /// restored; Adam moments restart from zero.
    pub fn resume_from(&mut self, path: &Path) -> Result<()> {
        let ckpt = read_checkpoint(path)?;
        ckpt.check_config(self.model.config(), path)?;
        ckpt.assign_to(&self.model)?;
        self.epoch = ckpt.epoch;
        self.step = ckpt.step;
        Ok(())
    }
}

/// Mean per-slice L1 of `model` on `pairs`, eval mode.
pub fn mean_l1(model: &DgcnModel, pairs: &SlicePairs, batch_size: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(contract_err!("no slices to evaluate"));
    }
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let mut sum = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = pairs.batch(chunk, model.dtype(), model.device())?;
        let pred = model.forward(&x, Mode::Eval)?;
        sum += scalar_f64(&l1_loss(&pred, &y)?)? * chunk.len() as f64;
    }
    Ok(sum / pairs.len() as f64)
}

/// Trains a fresh generator on the train (and optionally val) split.
pub fn train(
    cfg: &TrainConfig,
    train_set: &PairedDataset,
    val_set: Option<&PairedDataset>,
    backbone: Option<Arc<BackboneHandle>>,
    out_dir: Option<&Path>,
    dtype: DType,
) -> Result<(DgcnModel, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(contract_err!("training dataset is empty"));
    }
    let opts = BuildOptions {
        seed: cfg.seed,
        dtype,
        device: Device::Cpu,
        taps: None,
    };
    let model_bb = if cfg.model.variant.uses_backbone() { backbone.clone() } else { None };
    let model = build_generator(&cfg.model, model_bb, &opts)?;
    let mut trainer = Trainer::new(model, backbone, cfg.clone())?;
    if let Some(dir) = out_dir {
        trainer.log_to(&dir.join("train_log.jsonl"))?;
    }
    let size = cfg.model.input_size;
    let tr = train_set.slice_pairs(size)?;
    let va = val_set.map(|v| v.slice_pairs(size)).transpose()?;
    let log = trainer.fit(&tr, va.as_ref(), out_dir)?;
    Ok((trainer.into_model(), log))
}

const META_VERSION: &str = "format_version";
const META_CONFIG: &str = "generator_config";
const META_BACKBONE: &str = "backbone";
const META_DTYPE: &str = "dtype";
const META_EPOCH: &str = "epoch";
const META_STEP: &str = "step";
const BUFFER_PREFIX: &str = "buffer.";

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64",
        DType::F32 => "f32",
        DType::F16 => "f16",
        DType::BF16 => "bf16",
        _ => "other",
    }
}

pub fn save_checkpoint(model: &DgcnModel, path: &Path) -> Result<()> {
    save_checkpoint_at(model, path, 0, 0)
}

fn save_checkpoint_at(model: &DgcnModel, path: &Path, epoch: usize, step: usize) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = model
        .store()
        .params()
        .iter()
        .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
        .collect();
    tensors.extend(
        model
            .store()
            .buffers()
            .iter()
            .map(|(k, v)| (format!("{BUFFER_PREFIX}{k}"), v.as_tensor().clone())),
    );
    let meta: HashMap<String, String> = [
        (META_VERSION, CHECKPOINT_FORMAT_VERSION.to_string()),
        (META_CONFIG, serde_json::to_string(model.config())?),
        (
            META_BACKBONE,
            model.backbone().map(|b| b.identifier()).unwrap_or_else(|| "none".into()),
        ),
        (META_DTYPE, dtype_name(model.dtype()).to_string()),
        (META_EPOCH, epoch.to_string()),
        (META_STEP, step.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    safetensors::serialize_to_file(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(meta), path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Parsed checkpoint contents.
pub struct Checkpoint {
    pub config: GeneratorConfig,
    pub backbone: String,
    pub dtype: String,
    pub epoch: usize,
    pub step: usize,
    pub tensors: HashMap<String, Tensor>,
}

fn corrupt(path: &Path, why: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, why.to_string()))
}

/// Reads and version-checks a checkpoint without building a model.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(path, e))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let version = meta.get(META_VERSION).cloned().unwrap_or_else(|| "missing".into());
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Migration {
            found: version,
            expected: CHECKPOINT_FORMAT_VERSION.into(),
        });
    }
    let get = |k: &str| meta.get(k).cloned().ok_or_else(|| corrupt(path, format!("missing metadata `{k}`")));
    let config: GeneratorConfig = serde_json::from_str(&get(META_CONFIG)?).map_err(|e| corrupt(path, e))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu).map_err(|e| corrupt(path, e))?;
    Ok(Checkpoint {
        config,
        backbone: get(META_BACKBONE)?,
        dtype: get(META_DTYPE)?,
        epoch: get(META_EPOCH)?.parse().map_err(|e| corrupt(path, e))?,
        step: get(META_STEP)?.parse().map_err(|e| corrupt(path, e))?,
        tensors,
    })
}

impl Checkpoint {
    fn check_config(&self, expected: &GeneratorConfig, path: &Path) -> Result<()> {
        if &self.config != expected {
            return Err(config_err!(
                "{} was written for {:?}, not {:?}",
                path.display(),
                self.config,
                expected
            ));
        }
        Ok(())
    }

    fn assign_to(&self, model: &DgcnModel) -> Result<()> {
        let store = model.store();
        let expected = store.params().len() + store.buffers().len();
        if self.tensors.len() != expected {
            return Err(config_err!("checkpoint holds {} tensors, model expects {expected}", self.tensors.len()));
        }
        let named = store
            .params()
            .iter()
            .map(|(k, v)| (k.clone(), v))
            .chain(store.buffers().iter().map(|(k, v)| (format!("{BUFFER_PREFIX}{k}"), v)));
        for (name, var) in named {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| config_err!("checkpoint lacks tensor `{name}`"))?;
            if t.dims() != var.dims() {
                return Err(config_err!("tensor `{name}` is {:?}, model expects {:?}", t.dims(), var.dims()));
            }
            var.set(&t.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        Ok(())
    }
}

/// Rebuilds a generator from a checkpoint. When `expected` is given the
/// stored config must equal it. Variants that use a backbone need one whose
/// identifier matches the stored one.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&GeneratorConfig>,
    backbone: Option<Arc<BackboneHandle>>,
) -> Result<DgcnModel> {
    let ckpt = read_checkpoint(path)?;
    if let Some(e) = expected {
        ckpt.check_config(e, path)?;
    }
    let dtype = match ckpt.dtype.as_str() {
        "f64" => DType::F64,
        "f32" => DType::F32,
        other => return Err(corrupt(path, format!("unsupported dtype `{other}`"))),
    };
    let backbone = if ckpt.config.variant.uses_backbone() {
        let bb = backbone.ok_or_else(|| config_err!("variant {} needs a backbone to load", ckpt.config.variant))?;
        if bb.identifier() != ckpt.backbone {
            return Err(config_err!(
                "checkpoint expects backbone `{}`, got `{}`",
                ckpt.backbone,
                bb.identifier()
            ));
        }
        Some(bb)
    } else {
        None
    };
    let opts = BuildOptions {
        seed: 0,
        dtype,
        device: Device::Cpu,
        taps: None,
    };
    let model = build_generator(&ckpt.config, backbone, &opts)?;
    ckpt.assign_to(&model)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                epochs: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn epoch_order_is_seeded_permutation() {
        let a = Trainer::epoch_order(7, 0, 20);
        assert_eq!(a, Trainer::epoch_order(7, 0, 20));
        assert_ne!(a, Trainer::epoch_order(7, 1, 20));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn log_record_round_trip() {
        let r = LogRecord::Step {
            step: 3,
            epoch: 0,
            l1: 0.5,
            mldp: 0.25,
            total: 0.75,
            elapsed_s: 1.0,
        };
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.contains("\"kind\":\"step\""));
        assert_eq!(serde_json::from_str::<LogRecord>(&line).unwrap(), r);
    }
}
