use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, ResumeState};
use super::metrics::weighted_relative_l2;
use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor};
use crate::datagen::{sample_rng, Dataset};
use crate::error::{ensure, Error, Result};
use crate::neuralop::{Model, Normalizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from `lr` to zero over the run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub val_fraction: f64,
    /// Write a resumable checkpoint every this many epochs (and at the end).
    pub checkpoint_every: Option<usize>,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            grad_clip: Some(1.0),
            val_fraction: 0.1,
            checkpoint_every: None,
            schedule: Schedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "learning rate must be positive, got {}", self.lr);
        ensure!(self.batch_size >= 1, Config, "batch size must be positive");
        ensure!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), Config, "Adam betas must lie in [0, 1)");
        ensure!(self.eps > 0.0, Config, "Adam epsilon must be positive");
        ensure!(
            (0.0..=0.5).contains(&self.val_fraction),
            Config,
            "validation fraction must lie in [0, 0.5], got {}",
            self.val_fraction
        );
        ensure!(self.grad_clip.is_none_or(|c| c > 0.0), Config, "gradient clip norm must be positive");
        ensure!(self.checkpoint_every != Some(0), Config, "checkpoint cadence must be positive");
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    /// Learning rate used throughout epoch `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let x = epoch as f64 / self.epochs.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample relative L² over the epoch's mini-batches.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub train_samples: usize,
    pub val_samples: usize,
}

impl TrainReport {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr,seconds\n");
        for r in &self.history {
            let val = r.val_loss.map_or(String::new(), |v| format!("{v:.10e}"));
            s += &format!("{},{:.10e},{},{:.6e},{:.3}\n", r.epoch, r.train_loss, val, r.lr, r.seconds);
        }
        s
    }
}

/// Deterministic train/validation index split.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut sample_rng(seed, u64::MAX));
    let n_val = (n as f64 * val_fraction).floor() as usize;
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Checks that the model consumes and produces what the dataset holds.
pub fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    let c = model.config();
    let t = &data.task;
    ensure!(
        c.in_channels == t.in_channels() && c.out_channels == t.out_channels(),
        Shape,
        "model maps {} -> {} channels, task needs {} -> {}",
        c.in_channels,
        c.out_channels,
        t.in_channels(),
        t.out_channels()
    );
    ensure!(
        c.input_grid.points == t.input_grid().points && c.output_grid.points == t.output_grid().points,
        Shape,
        "model grids ({} -> {} points) do not match the task ({} -> {})",
        c.input_grid.points,
        c.output_grid.points,
        t.input_grid().points,
        t.output_grid().points
    );
    Ok(())
}

/// Loss and parameter gradients of one sample.
fn sample_grad(model: &Model, data: &Dataset, j: usize) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let loss = model.loss(&mut tape, &vars, data.input(j), data.output(j))?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let mut g = tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, grads))
}

/// Mean relative L² of the model on the given samples.
pub fn mean_error(model: &Model, data: &Dataset, idx: &[usize]) -> Result<f64> {
    let w = model.output_quadrature().1;
    let errs = idx
        .par_iter()
        .map(|&j| weighted_relative_l2(model.predict(data.input(j))?.view(), data.output(j), w))
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Minimises the mean relative L² error with mini-batch Adam.
///
/// The best parameters by validation error (training error when there is
/// no validation split) end up in `ckpt.model`; `ckpt.resume` holds the
/// last parameters and optimizer moments, so calling `train` again on the
/// returned checkpoint with a larger epoch count continues the run.
/// Gradients are reduced in sample order, so results do not depend on the
/// number of worker threads.
pub fn train(
    ckpt: &mut Checkpoint,
    data: &Dataset,
    cfg: &TrainConfig,
    save_to: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    data.validate()?;
    let hash = data.task.hash()?;
    ensure!(
        ckpt.task_hash == hash,
        Config,
        "checkpoint was created for task {} but the dataset belongs to task {}",
        &ckpt.task_hash[..12.min(ckpt.task_hash.len())],
        &hash[..12]
    );
    check_compatible(&ckpt.model, data)?;

    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    ensure!(!train_idx.is_empty(), Usage, "no training samples left after the validation split");

    let mut state = match ckpt.resume.take() {
        Some(r) => r,
        None => ResumeState {
            adam: AdamState::new(cfg.adam(), ckpt.model.params()),
            last_params: ckpt.model.params().to_vec(),
            epochs_done: 0,
            best_val: None,
            history: Vec::new(),
        },
    };
    ensure!(
        state.last_params.len() == ckpt.model.params().len() && state.adam.m.len() == state.last_params.len(),
        Format,
        "optimizer state does not match the model"
    );

    if state.epochs_done == 0 && cfg.epochs > 0 {
        let sub = data.subset(&train_idx);
        ckpt.model.normalizer = Normalizer::fit(&sub.inputs, &sub.outputs);
    }
    state.adam.config = cfg.adam();

    let mut best_params = ckpt.model.params().to_vec();
    let mut best_epoch = state.history.iter().filter(|r| Some(select_loss(r)) == state.best_val).map(|r| r.epoch).next_back();
    let mut work = ckpt.model.clone();
    work.params_mut().clone_from_slice(&state.last_params);

    for epoch in state.epochs_done..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut sample_rng(cfg.seed, epoch as u64));
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = batch.par_iter().map(|&j| sample_grad(&work, data, j)).collect::<Result<Vec<_>>>()?;
            let mut total: Vec<Tensor> = work.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
            for (&j, (loss, grads)) in batch.iter().zip(&results) {
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "loss became {loss} at epoch {epoch}, batch {b}, sample {j} (lr {lr:.3e}, \
                         parameter norm {:.3e}); try a smaller learning rate",
                        global_norm(work.params())
                    )));
                }
                loss_sum += loss;
                for (t, g) in total.iter_mut().zip(grads) {
                    t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let norm = global_norm(&total) * inv;
            let scale = match cfg.grad_clip {
                Some(c) if norm > c => inv * c / norm,
                _ => inv,
            };
            total.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= scale));
            state.adam.step_with_lr(work.params_mut(), &total, lr)?;
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let val_loss = if val_idx.is_empty() { None } else { Some(mean_error(&work, data, &val_idx)?) };
        let record = EpochRecord { epoch, train_loss, val_loss, lr, seconds: start.elapsed().as_secs_f64() };
        let score = select_loss(&record);
        if !score.is_finite() {
            return Err(Error::Numerical(format!("validation error became {score} at epoch {epoch}")));
        }
        if state.best_val.is_none_or(|b| score < b) {
            state.best_val = Some(score);
            best_params = work.params().to_vec();
            best_epoch = Some(epoch);
        }
        info!(
            "epoch {epoch}: train {train_loss:.5}{} lr {lr:.2e} ({:.1}s)",
            val_loss.map_or(String::new(), |v| format!(" val {v:.5}")),
            record.seconds
        );
        on_epoch(&record);
        state.history.push(record);
        state.epochs_done = epoch + 1;
        state.last_params = work.params().to_vec();

        let cadence_hit = cfg.checkpoint_every.is_some_and(|k| (epoch + 1) % k == 0);
        if let (Some(path), true) = (save_to, cadence_hit || epoch + 1 == cfg.epochs) {
            let mut snap = ckpt.clone();
            snap.model.normalizer = work.normalizer.clone();
            snap.model.params_mut().clone_from_slice(&best_params);
            snap.resume = Some(state.clone());
            snap.train_config = Some(cfg.clone());
            snap.save(path)?;
            debug!("wrote checkpoint {}", path.display());
        }
    }

    ckpt.model.params_mut().clone_from_slice(&best_params);
    ckpt.train_config = Some(cfg.clone());
    let report = TrainReport {
        history: state.history.clone(),
        best_epoch,
        best_val: state.best_val,
        train_samples: train_idx.len(),
        val_samples: val_idx.len(),
    };
    if state.epochs_done > 0 {
        ckpt.resume = Some(state);
    }
    Ok(report)
}

fn select_loss(r: &EpochRecord) -> f64 {
    r.val_loss.unwrap_or(r.train_loss)
}
