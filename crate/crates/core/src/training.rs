//! SGD with momentum and weight decay, a step learning-rate schedule, and
//! the epoch loop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::network::{Checkpoint, HoNetwork};
use crate::rng::split_seed;
use crate::subnet::Mode;
use crate::tensor::{ParamKind, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Decay applied to learnable step scales.
    pub h_weight_decay: f64,
    pub batch_size: usize,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Divergence when the epoch-mean train loss exceeds this multiple of
    /// the initial loss.
    pub divergence_threshold: f64,
    /// Samples per evaluation forward pass.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            h_weight_decay: 0.0,
            batch_size: 128,
            milestones: vec![100, 150, 200, 230],
            lr_factor: 0.1,
            epochs: 260,
            seed: 0,
            divergence_threshold: 10.0,
            eval_batch_size: 512,
        }
    }
}

impl TrainConfig {
    /// Fixed learning rate for `epochs` epochs.
    pub fn constant(lr0: f64, epochs: usize) -> Self {
        TrainConfig {
            lr0,
            epochs,
            milestones: Vec::new(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("milestones must be strictly increasing".into()));
        }
        if let Some(&last) = self.milestones.last() {
            if self.epochs > 0 && last >= self.epochs {
                return Err(Error::Config(format!(
                    "milestone {last} is not below the epoch count {}",
                    self.epochs
                )));
            }
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.h_weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    /// `lr0 × factor^(milestones ≤ epoch)`
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::Contract(format!(
                "epoch {epoch} outside 0..{}",
                self.epochs
            )));
        }
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        Ok(self.lr0 * self.lr_factor.powi(passed as i32))
    }
}

/// Momentum buffers, one per stored parameter, flattened in declaration
/// order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(store: &ParamStore) -> Self {
        SgdState {
            velocity: vec![0.0; store.scalar_count()],
        }
    }
}

/// `v ← μv + (g + wd·p)`, `p ← p − lr·v`, then clears the gradients.
///
/// Normalization scales and shifts get no decay; step scales use
/// `h_weight_decay`.
pub fn sgd_step(
    store: &mut ParamStore,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    h_weight_decay: f64,
) -> Result<()> {
    if state.velocity.len() != store.scalar_count() {
        return Err(Error::Contract(format!(
            "momentum state holds {} values for {} parameters",
            state.velocity.len(),
            store.scalar_count()
        )));
    }
    if let Some((_, p)) = store.iter().find(|(_, p)| p.tensor.grad().is_none()) {
        return Err(Error::Contract(format!("parameter `{}` has no gradient", p.name)));
    }
    let mut offset = 0;
    for (_, p) in store.iter_mut() {
        let wd = match p.kind {
            ParamKind::Weight | ParamKind::Bias => weight_decay,
            ParamKind::NormScale | ParamKind::NormShift => 0.0,
            ParamKind::StepScale => h_weight_decay,
        };
        let n = p.tensor.numel();
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let v = &mut state.velocity[offset..offset + n];
        for ((pv, g), vv) in p.tensor.data_mut().iter_mut().zip(&grad).zip(v.iter_mut()) {
            *vv = momentum * *vv + g + wd * *pv;
            *pv -= lr * *vv;
        }
        p.tensor.zero_grad();
        offset += n;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub seconds: f64,
    pub diverged: bool,
}

/// Mean loss and accuracy of `logits` against `labels`.
fn batch_metrics(tape: &mut Tape, logits: crate::tensor::Var, labels: &[usize]) -> Result<(crate::tensor::Var, usize)> {
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    Ok((loss, correct(tape.value(logits), labels)))
}

/// Cross-entropy of every row of `logits`, via a shifted log-sum-exp.
pub fn per_sample_cross_entropy(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, &l)| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[l]
        })
        .collect()
}

pub fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == l
        })
        .count()
}

/// Mean loss and accuracy over a dataset in evaluation mode. Non-finite
/// activations yield an infinite loss.
pub fn evaluate(net: &HoNetwork, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut total = 0.0;
    let mut hits = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.gather(chunk)?;
        let mut tape = Tape::new();
        match net.forward(&mut tape, &x, Mode::Eval) {
            Ok(out) => {
                let (loss, c) = batch_metrics(&mut tape, out.logits, &y)?;
                total += tape.value(loss).item()? * chunk.len() as f64;
                hits += c;
            }
            Err(Error::Divergence { .. }) => return Ok((f64::INFINITY, 0.0)),
            Err(e) => return Err(e),
        }
    }
    Ok((total / data.len() as f64, hits as f64 / data.len() as f64))
}

/// Resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub state: SgdState,
    /// Epochs completed so far.
    pub epoch: usize,
    /// Train-mode loss of the first mini-batch before any update.
    pub initial_loss: Option<f64>,
    pub diverged: bool,
}

pub type EpochHook<'a> = dyn FnMut(&HoNetwork, &Trainer, &EpochRecord) -> Result<()> + 'a;

impl Trainer {
    pub fn new(config: TrainConfig, net: &HoNetwork) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            state: SgdState::new(&net.store),
            config,
            epoch: 0,
            initial_loss: None,
            diverged: false,
        })
    }

    /// Continues a run captured by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, checkpoint: &Checkpoint) -> Result<(Self, HoNetwork)> {
        config.validate()?;
        let net = checkpoint.restore()?;
        if checkpoint.velocity.len() != net.store.scalar_count() {
            return Err(Error::Format(format!(
                "checkpoint momentum holds {} values for {} parameters",
                checkpoint.velocity.len(),
                net.store.scalar_count()
            )));
        }
        let trainer = Trainer {
            config,
            state: SgdState {
                velocity: checkpoint.velocity.clone(),
            },
            epoch: checkpoint.epoch as usize,
            initial_loss: checkpoint.initial_loss,
            diverged: false,
        };
        Ok((trainer, net))
    }

    pub fn checkpoint(&self, net: &HoNetwork) -> Checkpoint {
        Checkpoint::capture(net, self.epoch as u64, self.initial_loss, &self.state.velocity)
    }

    pub fn finished(&self) -> bool {
        self.diverged || self.epoch >= self.config.epochs
    }

    /// One epoch over shuffled mini-batches, then evaluation on `test`.
    pub fn run_epoch(&mut self, net: &mut HoNetwork, train: &Dataset, test: &Dataset) -> Result<EpochRecord> {
        let cfg = &self.config;
        let epoch = self.epoch;
        let lr = cfg.lr_at(epoch)?;
        let start = Instant::now();
        let order = batches(train.len(), cfg.batch_size, split_seed(cfg.seed, "epoch", epoch as u64))?;
        let mut loss_sum = 0.0;
        let mut hits = 0;
        let mut diverged = false;
        for idx in &order {
            let (x, y) = train.gather(idx)?;
            let mut tape = Tape::new();
            let out = match net.forward(&mut tape, &x, Mode::Train) {
                Ok(out) => out,
                Err(Error::Divergence { .. }) => {
                    diverged = true;
                    loss_sum = f64::INFINITY;
                    break;
                }
                Err(e) => return Err(e),
            };
            let (loss, c) = batch_metrics(&mut tape, out.logits, &y)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                diverged = true;
                loss_sum = f64::INFINITY;
                break;
            }
            self.initial_loss.get_or_insert(value);
            loss_sum += value * idx.len() as f64;
            hits += c;
            tape.backward(loss)?;
            net.store.zero_grad();
            net.store.accumulate_grads(&tape)?;
            net.apply_norm_stats(&out.stats)?;
            sgd_step(
                &mut net.store,
                &mut self.state,
                lr,
                cfg.momentum,
                cfg.weight_decay,
                cfg.h_weight_decay,
            )?;
            net.apply_clamps();
        }
        let n = train.len().max(1) as f64;
        let train_loss = loss_sum / n;
        let initial = self.initial_loss.unwrap_or(f64::INFINITY);
        if !train_loss.is_finite() || train_loss > cfg.divergence_threshold * initial {
            diverged = true;
        }
        let (test_loss, test_accuracy) = if diverged {
            (f64::NAN, 0.0)
        } else {
            evaluate(net, test, cfg.eval_batch_size)?
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            train_accuracy: if diverged { 0.0 } else { hits as f64 / n },
            test_loss,
            test_accuracy,
            seconds: start.elapsed().as_secs_f64(),
            diverged,
        };
        self.epoch += 1;
        self.diverged = diverged;
        Ok(record)
    }

    /// Runs the remaining epochs, stopping early on divergence.
    pub fn run(
        &mut self,
        net: &mut HoNetwork,
        train: &Dataset,
        test: &Dataset,
        hook: &mut EpochHook<'_>,
    ) -> Result<Vec<EpochRecord>> {
        if train.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let mut records = Vec::new();
        while !self.finished() {
            let record = self.run_epoch(net, train, test)?;
            hook(net, self, &record)?;
            records.push(record);
        }
        Ok(records)
    }
}

/// Trains from scratch; divergence is recorded, not returned as an error.
pub fn train(net: &mut HoNetwork, train: &Dataset, test: &Dataset, config: &TrainConfig) -> Result<Vec<EpochRecord>> {
    let mut trainer = Trainer::new(config.clone(), net)?;
    trainer.run(net, train, test, &mut |_, _, _| Ok(()))
}

#[cfg(test)]
mod tests;
