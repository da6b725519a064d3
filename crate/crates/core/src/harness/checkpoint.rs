use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autodiff::{AdamConfig, AdamState, Tensor};
use crate::error::{ensure, Error, Result};
use crate::formats::{read_file, write_file, CHECKPOINT_MAGIC};
use crate::neuralop::{Model, ModelConfig, Normalizer};

/// Optimizer state needed to continue an interrupted run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState {
    pub adam: AdamState,
    /// Parameters after the last completed epoch (the model holds the best ones).
    pub last_params: Vec<Tensor>,
    pub epochs_done: usize,
    pub best_val: Option<f64>,
    /// Loss history so far, one entry per completed epoch.
    pub history: Vec<super::EpochRecord>,
}

/// Trained (or freshly initialised) model tagged with the task it belongs to.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub task_hash: String,
    pub resume: Option<ResumeState>,
    pub train_config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    model: ModelConfig,
    task_hash: String,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    normalizer: Normalizer,
    train_config: Option<TrainConfig>,
    resume: Option<ResumeHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResumeHeader {
    adam: AdamConfig,
    step: u64,
    epochs_done: usize,
    best_val: Option<f64>,
    history: Vec<super::EpochRecord>,
}

fn take(values: &mut &[f64], shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            ensure!(values.len() >= n, Format, "parameter payload is truncated");
            let (head, rest) = values.split_at(n);
            *values = rest;
            Tensor::new(s.clone(), head.to_vec())
        })
        .collect()
}

impl Checkpoint {
    pub fn new(model: Model, task_hash: String) -> Self {
        Checkpoint { model, task_hash, resume: None, train_config: None }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let m = &self.model;
        let header = Header {
            format: "OBSP1".into(),
            version: 1,
            model: m.config().clone(),
            task_hash: self.task_hash.clone(),
            names: m.names().to_vec(),
            shapes: m.params().iter().map(|p| p.shape().to_vec()).collect(),
            normalizer: m.normalizer.clone(),
            train_config: self.train_config.clone(),
            resume: self.resume.as_ref().map(|r| ResumeHeader {
                adam: r.adam.config,
                step: r.adam.step,
                epochs_done: r.epochs_done,
                best_val: r.best_val,
                history: r.history.clone(),
            }),
        };
        let mut blobs: Vec<&[f64]> = m.params().iter().map(Tensor::data).collect();
        if let Some(r) = &self.resume {
            for group in [&r.last_params, &r.adam.m, &r.adam.v] {
                blobs.extend(group.iter().map(Tensor::data));
            }
        }
        write_file(path, CHECKPOINT_MAGIC, &header, &blobs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, values): (Header, Vec<f64>) = read_file(path, CHECKPOINT_MAGIC)?;
        ensure!(h.format == "OBSP1" && h.version == 1, Format, "unsupported checkpoint format {} v{}", h.format, h.version);
        ensure!(h.names.len() == h.shapes.len(), Format, "{} names for {} shapes", h.names.len(), h.shapes.len());
        let mut rest = values.as_slice();
        let params = take(&mut rest, &h.shapes)?;
        let model = Model::from_parts(h.model, h.names, params, h.normalizer)?;
        let resume = match h.resume {
            None => None,
            Some(r) => {
                let last_params = take(&mut rest, &h.shapes)?;
                let m = take(&mut rest, &h.shapes)?;
                let v = take(&mut rest, &h.shapes)?;
                Some(ResumeState {
                    adam: AdamState { config: r.adam, step: r.step, m, v },
                    last_params,
                    epochs_done: r.epochs_done,
                    best_val: r.best_val,
                    history: r.history,
                })
            }
        };
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing values in checkpoint", rest.len())));
        }
        Ok(Checkpoint { model, task_hash: h.task_hash, resume, train_config: h.train_config })
    }
}
