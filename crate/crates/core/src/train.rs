//! Training loop with early stopping, and top-k evaluation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore};
use crate::backbones::Model;
use crate::data::{augment, channel_stats, AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind, Scheduler, SchedulerKind};
use crate::tensor::{softmax_cross_entropy, Tensor};

pub const BATCH_SIZES: [usize; 4] = [32, 64, 128, 256];
/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 250;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub scheduler: SchedulerKind,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Crop/flip policy for training batches; `None` disables augmentation.
    pub augment: Option<AugmentPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            optimizer: OptimizerKind::Adam,
            scheduler: SchedulerKind::Cosine,
            max_epochs: 50,
            early_stop_patience: 5,
            seed: 0,
            augment: Some(AugmentPolicy::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !BATCH_SIZES.contains(&self.batch_size) {
            return Err(Error::config(
                "train.batch_size",
                format!("{} not in {BATCH_SIZES:?}", self.batch_size),
            ));
        }
        // Zero is allowed so a frozen run can serve as a control.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "train.learning_rate",
                format!("{} must be finite and >= 0", self.learning_rate),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "train.weight_decay",
                format!("{} must be finite and >= 0", self.weight_decay),
            ));
        }
        if let OptimizerKind::Sgd { momentum } = self.optimizer {
            if !(0.7..1.0).contains(&momentum) {
                return Err(Error::config(
                    "train.optimizer.momentum",
                    format!("{momentum} not in [0.7, 1)"),
                ));
            }
        }
        if let SchedulerKind::Step { step_size } = self.scheduler {
            if step_size == 0 {
                return Err(Error::config("train.scheduler.step_size", "must be >= 1"));
            }
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be >= 1"));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::config("train.early_stop_patience", "must be >= 1"));
        }
        if let Some(p) = &self.augment {
            if !(0.0..=1.0).contains(&p.hflip_p) {
                return Err(Error::config(
                    "train.augment.hflip_p",
                    format!("{} not in [0, 1]", p.hflip_p),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::EarlyStopped => "early_stopped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were restored.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

#[derive(Serialize)]
struct LogFooter {
    best_epoch: usize,
    best_val_top1: f64,
    stop_reason: StopReason,
}

impl TrainLog {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    /// One JSON object per epoch, then a footer with the best epoch and stop reason.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        let footer = LogFooter {
            best_epoch: self.best_epoch,
            best_val_top1: self.best().val_top1,
            stop_reason: self.stop_reason,
        };
        out.push_str(&serde_json::to_string(&footer)?);
        out.push('\n');
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Patience-based stopping on a metric that should increase. Ties do not
/// count as improvement, so the earliest best epoch wins.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            bad: 0,
        }
    }

    /// Feeds the metric for 1-based `epoch`; returns `true` when training should stop.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        self.bad >= self.patience
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.best_epoch == epoch
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Rank of `label` among `logits`: the number of classes ranked ahead of it.
/// Equal logits rank the lower class index first.
pub fn label_rank(logits: &[f64], label: usize) -> usize {
    let v = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < label))
        .count()
}

/// Fraction of rows whose label is among the `k` largest logits.
pub fn top_k_accuracy(logits: &Tensor<f64>, labels: &[usize], k: usize) -> Result<f64> {
    let [n, classes, _, _] = logits.shape();
    if k == 0 || k > classes {
        return Err(Error::config(
            "top_k",
            format!("k = {k} must lie in 1..={classes}"),
        ));
    }
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {l} >= {classes} classes")));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| label_rank(logits.sample(i), l) < k)
        .count();
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    /// Top-`min(5, classes)` accuracy.
    pub top5: f64,
    pub per_class: Vec<f64>,
    pub loss: f64,
    pub samples: usize,
}

/// Metrics from precomputed logits.
pub fn metrics_from_logits(logits: &Tensor<f64>, labels: &[usize]) -> Result<Metrics> {
    let classes = logits.shape()[1];
    let top1 = top_k_accuracy(logits, labels, 1)?;
    let top5 = top_k_accuracy(logits, labels, classes.min(5))?;
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        if label_rank(logits.sample(i), l) == 0 {
            hits[l] += 1;
        }
    }
    let per_class = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect();
    let loss = if labels.is_empty() {
        0.0
    } else {
        softmax_cross_entropy(logits, labels)?.0
    };
    Ok(Metrics {
        top1,
        top5,
        per_class,
        loss,
        samples: labels.len(),
    })
}

/// Logits for every sample of `ds`, computed in fixed-size chunks.
pub fn predict_dataset(model: &Model<f64>, ds: &Dataset) -> Result<Tensor<f64>> {
    let k = model.spec.num_classes;
    let mut data = Vec::with_capacity(ds.len() * k);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        data.extend_from_slice(model.predict(&ds.images.gather_batch(chunk))?.data());
    }
    Tensor::from_vec([ds.len(), k, 1, 1], data)
}

pub fn evaluate(model: &Model<f64>, ds: &Dataset) -> Result<Metrics> {
    if ds.num_classes != model.spec.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, model {}",
            ds.num_classes, model.spec.num_classes
        )));
    }
    metrics_from_logits(&predict_dataset(model, ds)?, &ds.labels)
}

fn params_finite(params: &ParamStore<f64>) -> bool {
    params.iter().all(|p| p.value.is_finite())
}

/// Trains `model` on `train_ds`, selecting the epoch with the best validation
/// top-1. Channel normalization is fitted on `train_ds` first. On return the
/// best-epoch weights are loaded. A non-finite loss or parameter aborts with
/// [`Error::Divergence`] after restoring the weights from the last completed
/// epoch.
pub fn train(
    model: &mut Model<f64>,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    for ds in [train_ds, val_ds] {
        ds.validate()?;
        if ds.num_classes != model.spec.num_classes {
            return Err(Error::Data(format!(
                "dataset has {} classes, model {}",
                ds.num_classes, model.spec.num_classes
            )));
        }
    }
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Data("train and val splits must be non-empty".into()));
    }
    model.normalization = Some(channel_stats(train_ds));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay);
    let mut sched = Scheduler::new(cfg.scheduler, cfg.learning_rate, cfg.max_epochs);
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut best_params = model.params.clone();
    let mut last_good = model.params.clone();
    let mut records = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..train_ds.len()).collect();

    for t in 0..cfg.max_epochs {
        let epoch = t + 1;
        let lr = sched.lr(t);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let mut x = train_ds.images.gather_batch(idx);
            if let Some(policy) = cfg.augment {
                x = augment(&x, &mut rng, policy);
            }
            let labels: Vec<usize> = idx.iter().map(|&i| train_ds.labels[i]).collect();
            let mut g = Graph::new();
            let fp = model.forward(&mut g, &x)?;
            let loss = g.softmax_cross_entropy(fp.logits, &labels)?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                model.params = last_good;
                return Err(Error::Divergence { epoch });
            }
            loss_sum += lv * idx.len() as f64;
            let grads = g.backward(loss)?.into_param_map();
            opt.step(&mut model.params, &grads, lr)?;
        }
        if !params_finite(&model.params) {
            model.params = last_good;
            return Err(Error::Divergence { epoch });
        }
        last_good.clone_from(&model.params);

        let val = evaluate(model, val_ds)?;
        if !val.loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_ds.len() as f64,
            val_loss: val.loss,
            val_top1: val.top1,
            val_top5: val.top5,
            lr,
        };
        log::info!(
            "epoch {epoch}: train_loss {:.4} val_loss {:.4} top1 {:.4} top5 {:.4} lr {lr:.3e}",
            rec.train_loss,
            rec.val_loss,
            rec.val_top1,
            rec.val_top5
        );
        records.push(rec);
        sched.observe(val.loss);
        let stop = stopper.observe(epoch, val.top1);
        if stopper.improved_at(epoch) {
            best_params.clone_from(&model.params);
        }
        if stop {
            stop_reason = StopReason::EarlyStopped;
            break;
        }
    }
    model.params = best_params;
    Ok(TrainLog {
        epochs: records,
        best_epoch: stopper.best_epoch(),
        stop_reason,
    })
}
