//! Plain SGD training with a plateau learning-rate schedule, and top-1
//! evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Protocol, Sample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{derive, seeded};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub plateau_factor: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub protocol: Protocol,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.0025,
            plateau_factor: 0.1,
            patience: 5,
            batch_size: 32,
            max_epochs: 64,
            seed: 0,
            protocol: Protocol::CrossSubject,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!(
                "train.lr0 must be finite and >= 0, got {}",
                self.lr0
            )));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::config("train.plateau_factor must lie in (0, 1]"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once eval top-1 has failed to
/// beat its best for `patience` consecutive epochs, then starts counting
/// again.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr0: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr: lr0,
            factor,
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records an evaluation and returns the learning rate for the next epoch.
    pub fn observe(&mut self, top1: f64) -> f64 {
        match self.best {
            Some(best) if top1 <= best => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.lr *= self.factor;
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(top1);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub top1: f64,
    pub lr: f64,
    pub sec: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain record") + "\n")
            .collect()
    }

    pub fn final_top1(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.top1)
    }
}

/// Index of the largest value, the lowest index winning ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn top1_from_logits(logits: &[Tensor], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::input("cannot evaluate an empty split"));
    }
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(z, &y)| argmax(z.data()) == y)
        .count();
    Ok(correct as f64 / logits.len() as f64)
}

pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::input("cannot evaluate an empty split"));
    }
    let logits: Vec<Tensor> = samples
        .par_iter()
        .map(|s| model.logits(&s.views))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    top1_from_logits(&logits, &labels)
}

/// Mean loss and summed-then-averaged gradients of one batch. Per-sample
/// gradients are reduced in batch order so results do not depend on thread
/// scheduling.
fn batch_step(model: &Model, batch: &[&Sample]) -> Result<(f64, Vec<Tensor>)> {
    let results: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|s| model.loss_and_grads(&s.views, s.label))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut iter = results.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
    }
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss / n, grads))
}

/// Trains `model` in place; `on_epoch` sees each record as it is produced.
pub fn train_loop(
    model: &mut Model,
    train: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::input("training split is empty"));
    }
    let mut sched = PlateauScheduler::new(cfg.lr0, cfg.plateau_factor, cfg.patience);
    sched.observe(evaluate(model, test)?);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let lr = sched.lr();
        order.sort_unstable();
        order.shuffle(&mut seeded(derive(cfg.seed, epoch as u64)));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_step(model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {b}"
                )));
            }
            total += loss * batch.len() as f64;
            if lr != 0.0 {
                let store = model.store_mut();
                for (i, g) in grads.iter().enumerate() {
                    let p = store.get_mut(crate::params::ParamId::from_index(i));
                    p.data_mut().iter_mut().zip(g.data()).for_each(|(w, d)| *w -= lr * d);
                }
            }
        }
        if !model.store().all_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite in epoch {epoch}")));
        }
        let top1 = evaluate(model, test)?;
        sched.observe(top1);
        let rec = EpochRecord {
            epoch,
            loss: total / train.len() as f64,
            top1,
            lr,
            sec: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        log.epochs.push(rec);
    }
    Ok(log)
}

/// Caps the worker pool at `MVGMN_THREADS` when set. Call once, before any
/// parallel work.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("MVGMN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::config(format!("MVGMN_THREADS must be a positive integer, got {raw:?}")))?;
    // A pool configured earlier in the process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
