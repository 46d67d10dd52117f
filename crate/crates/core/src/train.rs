//! Mini-batch training with warmup + cosine AdamW and top-1 early stopping.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_indices, Dataset};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` means 10% of the total optimizer steps.
    pub warmup_steps: Option<usize>,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub patience: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub val_fraction: f64,
    /// Skip every optimizer update (weights stay at their initial values).
    pub freeze: bool,
    /// Stop as soon as train top-1 reaches this percentage.
    pub target_train_top1: Option<f64>,
    /// Evaluate train top-1 after every epoch (implied by `target_train_top1`).
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            warmup_steps: None,
            base_lr: 1e-3,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
            patience: 10,
            seed: 0,
            batch_size: 8,
            val_fraction: 0.2,
            freeze: false,
            target_train_top1: None,
            eval_train: false,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.epochs * self.steps_per_epoch(n_train)
    }

    pub fn warmup(&self, n_train: usize) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| self.total_steps(n_train) / 10)
    }

    pub fn validate(&self, n_train: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if n_train == 0 {
            return bad("training split is empty".into());
        }
        let total = self.total_steps(n_train);
        if self.warmup(n_train) >= total {
            return bad(format!(
                "warmup_steps {} must be < total steps {total}",
                self.warmup(n_train)
            ));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) || !self.weight_decay.is_finite() {
            return bad("base_lr and weight_decay must be finite, base_lr >= 0".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || self.eps <= 0.0 {
            return bad("betas must lie in [0, 1) and eps must be > 0".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch's updates.
    pub train_loss: f64,
    pub val_top1: f64,
    pub train_top1: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    EarlyStopped,
    TargetReached,
}

#[derive(Clone, Debug, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop: StopReason,
}

impl History {
    pub fn best(&self) -> &EpochRecord {
        &self.records[self.best_epoch - 1]
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("history has at least one epoch")
    }

    /// `epoch,train_loss,val_top1,lr`, full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_top1,lr\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_top1, r.lr);
        }
        out
    }
}

pub struct TrainOutcome {
    /// Weights of the best validation epoch.
    pub best: ParamStore,
    pub history: History,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Percentage of rows whose argmax equals the label; ties go to the lowest
/// class index.
pub fn top1_accuracy(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::shape(
            "top1_accuracy",
            format!("{} logit rows, {} labels", logits.len(), labels.len()),
        ));
    }
    if logits.is_empty() {
        return Err(Error::EmptySequence("top1_accuracy"));
    }
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == Some(label))
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

fn argmax(row: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in row.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Top-1 of `model` on the given samples of `data`.
pub fn evaluate(model: &Classifier, data: &Dataset, indices: &[usize]) -> Result<f64> {
    let mut logits = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &data.samples[i];
        logits.push(model.predict_logits(s)?);
        labels.push(s.label);
    }
    top1_accuracy(&logits, &labels)
}

/// Trains `model` in place on the seeded 80/20 split of `data`.
///
/// Stops after `epochs`, after `patience` epochs without a strict val top-1
/// improvement, or when `target_train_top1` is reached. `model` ends with
/// the last epoch's weights; the outcome carries the best-val weights.
pub fn train(model: &mut Classifier, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed)?;
    cfg.validate(train_idx.len())?;
    if val_idx.is_empty() {
        return Err(Error::InvalidConfig("validation split is empty".into()));
    }
    let total = cfg.total_steps(train_idx.len());
    let warmup = cfg.warmup(train_idx.len());
    let mut opt = AdamW::new(&model.store, cfg.adamw());
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(0x0de7);

    let mut records = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut step = 0;
    let mut stop = StopReason::Completed;
    let eval_train = cfg.eval_train || cfg.target_train_top1.is_some();

    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let mut acc: Vec<Vec<f64>> = Vec::new();
            for &i in batch {
                let (loss, grads) = model.loss_and_grads(&data.samples[i])?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step,
                        sample: i,
                        loss,
                    });
                }
                loss_sum += loss;
                if acc.is_empty() {
                    acc = grads;
                } else {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            acc.iter_mut().flatten().for_each(|x| *x *= inv);
            lr = lr_at(step, total, warmup, cfg.base_lr);
            if !cfg.freeze {
                opt.step(&mut model.store, &acc, lr)?;
            }
        }
        let val_top1 = evaluate(model, data, &val_idx)?;
        let train_top1 = if eval_train {
            Some(evaluate(model, data, &train_idx)?)
        } else {
            None
        };
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            val_top1,
            train_top1,
            lr,
        });
        if best.as_ref().is_none_or(|(b, ..)| val_top1 > *b) {
            best = Some((val_top1, epoch, model.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if let (Some(target), Some(acc)) = (cfg.target_train_top1, train_top1) {
            if acc >= target {
                stop = StopReason::TargetReached;
                break;
            }
        }
        if since_best >= cfg.patience {
            stop = StopReason::EarlyStopped;
            break;
        }
    }
    let (_, best_epoch, best_store) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best: best_store,
        history: History {
            records,
            best_epoch,
            stop,
        },
        train_indices: train_idx,
        val_indices: val_idx,
    })
}
