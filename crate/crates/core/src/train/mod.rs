//! Optimisation protocol: SGD with momentum, plateau learning-rate decay,
//! early stopping on a monitored validation metric and best-model selection.
//!
//! Everything runs on one thread in a fixed order, so a run is a pure
//! function of its configuration, data and seed.

pub mod checkpoint;
pub mod events;
pub mod experiment;
pub mod verify;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Gradients, Graph};
use crate::data::{augment, balance_lesion_slices, extract_samples, Batch, Fold, SliceSample, Volume};
use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::loss::{total_loss, LossConfig};
use crate::metrics::{binarize, confusion, ConfusionCounts, MetricRecord, SubjectAccumulator, DEFAULT_THRESHOLD};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use events::EventLog;

/// Quantity the plateau scheduler and early stopping watch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValDsc,
    /// A constant metric; exercises the decay and stopping mechanics.
    Frozen,
}

impl std::str::FromStr for Monitor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val_dsc" => Ok(Self::ValDsc),
            "frozen" => Ok(Self::Frozen),
            other => Err(Error::Config(format!("unknown monitor `{other}` (val_dsc|frozen)"))),
        }
    }
}

impl std::fmt::Display for Monitor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ValDsc => "val_dsc",
            Self::Frozen => "frozen",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub momentum: f64,
    pub monitor: Monitor,
    pub augment: bool,
    /// Keep lesion slices plus as many empty ones for training.
    pub balance: bool,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            plateau_factor: 0.1,
            plateau_patience: 10,
            min_lr: 1e-7,
            batch_size: 8,
            max_epochs: 200,
            early_stop_patience: 20,
            momentum: 0.9,
            monitor: Monitor::ValDsc,
            augment: true,
            balance: true,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr0) {
            return bad("min_lr must lie in [0, lr0]");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("lr0", self.lr0.to_string()),
            ("plateau_factor", self.plateau_factor.to_string()),
            ("plateau_patience", self.plateau_patience.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("early_stop_patience", self.early_stop_patience.to_string()),
            ("momentum", self.momentum.to_string()),
            ("monitor", self.monitor.to_string()),
            ("augment", self.augment.to_string()),
            ("balance", self.balance.to_string()),
            ("threshold", self.threshold.to_string()),
            ("train_seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Consumes the training keys of `map`, starting from defaults.
    pub fn take_from_kv(map: &mut KvMap) -> Result<Self> {
        let mut c = Self::default();
        macro_rules! field {
            ($key:literal, $field:ident) => {
                if let Some(v) = kv::take(map, $key)? {
                    c.$field = v;
                }
            };
        }
        field!("lr0", lr0);
        field!("plateau_factor", plateau_factor);
        field!("plateau_patience", plateau_patience);
        field!("min_lr", min_lr);
        field!("batch_size", batch_size);
        field!("max_epochs", max_epochs);
        field!("early_stop_patience", early_stop_patience);
        field!("momentum", momentum);
        field!("monitor", monitor);
        field!("augment", augment);
        field!("balance", balance);
        field!("threshold", threshold);
        field!("train_seed", seed);
        c.validate()?;
        Ok(c)
    }
}

/// Rounds to 12 significant digits so repeated decay lands on the decimal
/// value (`1e-5 * 0.1` is `1e-6`, not `1.0000000000000002e-6`).
fn snap(x: f64) -> f64 {
    format!("{x:.11e}").parse().unwrap_or(x)
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without a strict improvement, never going below `min_lr`.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr0,
            factor: cfg.plateau_factor,
            patience: cfg.plateau_patience,
            min_lr: cfg.min_lr,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's metric; returns the new rate if it was reduced.
    pub fn step(&mut self, metric: f64) -> Option<f64> {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.bad_epochs = 0;
            return None;
        }
        self.bad_epochs += 1;
        if self.bad_epochs < self.patience || self.lr <= self.min_lr {
            return None;
        }
        self.bad_epochs = 0;
        self.lr = snap(self.lr * self.factor).max(self.min_lr);
        Some(self.lr)
    }
}

/// Heavy-ball SGD: `v = momentum * v + grad`, `p -= lr * v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    momentum: f64,
    velocity: HashMap<ParamId, Tensor<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, velocity: HashMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64) {
        let ids: Vec<ParamId> = store.weight_ids().collect();
        let (mu, lr) = (self.momentum as f32, lr as f32);
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let v = self.velocity.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = mu * *vi + gi;
            }
            for (p, &vi) in store.get_mut(id).data_mut().iter_mut().zip(v.data()) {
                *p -= lr * vi;
            }
        }
    }
}

/// Slice samples of one fold. Training samples are balanced when requested;
/// validation and test keep every slice.
#[derive(Clone, Debug)]
pub struct FoldData {
    pub train: Vec<SliceSample>,
    pub val: Vec<SliceSample>,
    pub test: Vec<SliceSample>,
}

impl FoldData {
    pub fn build(volumes: &[Volume], fold: &Fold, depth: usize, balance: bool, seed: u64) -> Result<Self> {
        fold.check_disjoint()?;
        let by_id: HashMap<&str, &Volume> = volumes.iter().map(|v| (v.subject_id.as_str(), v)).collect();
        let collect = |ids: &[String]| -> Result<Vec<SliceSample>> {
            let mut out = Vec::new();
            for id in ids {
                let v = by_id.get(id.as_str()).ok_or_else(|| Error::Data(format!("unknown subject {id}")))?;
                out.extend(extract_samples(v, depth)?);
            }
            Ok(out)
        };
        let mut train = collect(&fold.train)?;
        if balance {
            train = balance_lesion_slices(train, seed);
        }
        let (val, test) = (collect(&fold.val)?, collect(&fold.test)?);
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data("fold has an empty training or validation split".into()));
        }
        Ok(Self { train, val, test })
    }
}

/// Subject-level metrics of a set of slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean over subjects; each subject's slices are stacked first.
    pub mean: MetricRecord,
    pub per_subject: Vec<(String, MetricRecord)>,
}

/// Foreground probabilities of every sample, one `H * W` plane each, with
/// running batchnorm statistics.
pub fn predict_samples(model: &Model<f32>, samples: &[SliceSample], batch_size: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        let batch = Batch::new(&refs)?;
        let seg = model.predict(&batch.input)?.seg_map;
        let pix = chunk[0].height * chunk[0].width;
        out.extend(seg.data().chunks(pix).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Subject-level metrics of `samples` after thresholding.
pub fn evaluate(model: &Model<f32>, samples: &[SliceSample], batch_size: usize, threshold: f64) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut acc = SubjectAccumulator::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        for (s, probs) in chunk.iter().zip(predict_samples(model, chunk, chunk.len())?) {
            let pred = binarize(&probs, threshold);
            let gt: Vec<bool> = s.mask.iter().map(|&m| m != 0).collect();
            acc.add(&s.subject_id, &confusion(&pred, &gt)?);
        }
    }
    Ok(Evaluation { mean: acc.mean()?, per_subject: acc.per_subject() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Rate used during this epoch.
    pub lr: f64,
    pub loss_total: f64,
    pub loss_wiou: f64,
    pub loss_wbce: f64,
    pub loss_edge: f64,
    /// Pooled DSC of the training forward passes (augmented, batch statistics).
    pub train_dsc: f64,
    pub val: MetricRecord,
    pub monitored: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub variant: String,
    pub parameters: usize,
    pub epochs: Vec<EpochRecord>,
    /// Rate after the last scheduler step.
    pub final_lr: f64,
    pub best_epoch: usize,
    pub best_val: MetricRecord,
    pub stop_reason: StopReason,
    pub test: Option<Evaluation>,
    pub train_eval: Option<Evaluation>,
    pub checkpoint: Option<PathBuf>,
    pub wall_time_s: f64,
}

impl RunRecord {
    /// Distinct learning rates in the order they were used, including the
    /// final one.
    pub fn lr_history(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for lr in self.epochs.iter().map(|e| e.lr).chain([self.final_lr]) {
            if out.last() != Some(&lr) {
                out.push(lr);
            }
        }
        out
    }

    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss_total).collect()
    }

    pub const CSV_HEADER: &'static str =
        "epoch,lr,loss_total,loss_wiou,loss_wbce,loss_edge,train_dsc,val_dsc,val_iou,val_precision,val_recall,improved";

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.lr,
                e.loss_total,
                e.loss_wiou,
                e.loss_wbce,
                e.loss_edge,
                e.train_dsc,
                e.val.dsc,
                e.val.iou,
                e.val.precision,
                e.val.recall,
                e.improved
            ));
        }
        s
    }
}

/// Per-run options that are not part of the reproducible configuration.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub label: String,
    /// Where to write the best checkpoint.
    pub checkpoint: Option<PathBuf>,
    /// Also evaluate the best model on the training subjects (all slices).
    pub eval_train: bool,
}

/// Builds a model from `model_cfg`, trains it on `data` and returns the run
/// record with the best-validation model.
pub fn train_fold(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    data: &FoldData,
    opts: &RunOptions,
    log: &EventLog,
) -> Result<(RunRecord, Model<f32>)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let started = Instant::now();
    let mut model = Model::<f32>::build(model_cfg)?;
    let mut sgd = Sgd::new(cfg.momentum);
    let mut sched = PlateauScheduler::new(cfg);
    let mut best_store = model.store.clone();
    let mut best: Option<(usize, f64, MetricRecord)> = None;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    log.emit(
        "run_start",
        json!({"label": opts.label, "variant": model_cfg.variant.name(), "parameters": model.count_parameters(),
               "train_slices": data.train.len(), "val_slices": data.val.len(), "test_slices": data.test.len()}),
    );

    for epoch in 1..=cfg.max_epochs {
        let lr = sched.lr();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);

        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        let mut train_counts = ConfusionCounts::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<SliceSample> = chunk
                .iter()
                .map(|&i| {
                    let seed: u64 = rng.random();
                    if cfg.augment {
                        augment(&data.train[i], seed)
                    } else {
                        data.train[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&SliceSample> = samples.iter().collect();
            let batch = Batch::new(&refs)?;
            let mut g = Graph::train();
            let out = model.forward(&mut g, &batch.input)?;
            let edge = out.edge.map(|e| (e, &batch.edge_half));
            let (loss, parts) = total_loss(&mut g, out.seg, &batch.mask, edge, loss_cfg)?;
            let grads = g.backward(loss);
            let finite_grads = model.store.weight_ids().all(|id| grads.param(id).is_none_or(|t| t.data().iter().all(|v| v.is_finite())));
            if !parts.total.is_finite() || !finite_grads {
                log.emit(
                    "abort",
                    json!({"label": opts.label, "epoch": epoch, "batch": b + 1, "lr": lr, "loss_wiou": parts.wiou,
                           "loss_wbce": parts.wbce, "loss_edge": parts.edge, "beta": parts.beta}),
                );
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1, lr });
            }
            let pred = binarize(g.value(out.seg).data(), cfg.threshold);
            let gt: Vec<bool> = batch.mask.data().iter().map(|&m| m > 0.5).collect();
            train_counts.merge(&confusion(&pred, &gt)?);
            let updates = g.take_buffer_updates();
            drop(g);
            sgd.step(&mut model.store, &grads, lr);
            for (id, value) in updates {
                model.store.set(id, value)?;
            }
            for (s, v) in sums.iter_mut().zip([parts.total, parts.wiou, parts.wbce, parts.edge]) {
                *s += v;
            }
            batches += 1;
        }

        let val = evaluate(&model, &data.val, cfg.batch_size, cfg.threshold)?.mean;
        let monitored = match cfg.monitor {
            Monitor::ValDsc => val.dsc,
            Monitor::Frozen => 0.0,
        };
        let improved = best.as_ref().is_none_or(|&(_, m, _)| monitored > m);
        if improved {
            best = Some((epoch, monitored, val));
            best_store = model.store.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        let n = batches.max(1) as f64;
        let record = EpochRecord {
            epoch,
            lr,
            loss_total: sums[0] / n,
            loss_wiou: sums[1] / n,
            loss_wbce: sums[2] / n,
            loss_edge: sums[3] / n,
            train_dsc: train_counts.dsc(),
            val,
            monitored,
            improved,
        };
        log.emit("epoch", json!({"label": opts.label, "record": record}));
        epochs.push(record);
        if let Some(new_lr) = sched.step(monitored) {
            log.emit("lr_reduced", json!({"label": opts.label, "epoch": epoch, "lr": new_lr}));
        }
        if since_best >= cfg.early_stop_patience {
            stop = StopReason::EarlyStop;
            break;
        }
    }

    let (best_epoch, _, best_val) = best.expect("at least one epoch ran");
    model.store = best_store;
    let test = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(&model, &data.test, cfg.batch_size, cfg.threshold)?)
    };
    let train_eval = if opts.eval_train {
        Some(evaluate(&model, &data.train, cfg.batch_size, cfg.threshold)?)
    } else {
        None
    };
    if let Some(path) = &opts.checkpoint {
        save_checkpoint(&model, path)?;
    }
    let record = RunRecord {
        label: opts.label.clone(),
        variant: model_cfg.variant.name().to_string(),
        parameters: model.count_parameters(),
        epochs,
        final_lr: sched.lr(),
        best_epoch,
        best_val,
        stop_reason: stop,
        test,
        train_eval,
        checkpoint: opts.checkpoint.clone(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    log.emit(
        "run_end",
        json!({"label": opts.label, "best_epoch": best_epoch, "stop_reason": stop, "best_val": best_val,
               "test": record.test.as_ref().map(|t| t.mean), "wall_time_s": record.wall_time_s}),
    );
    Ok((record, model))
}

/// Writes `records` as pretty JSON.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
