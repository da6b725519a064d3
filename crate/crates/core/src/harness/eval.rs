use std::time::Instant;

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{wasserstein1, weighted_relative_l2, HistogramPair, Summary};
use super::train::check_compatible;
use crate::datagen::{Dataset, Task};
use crate::dynsys::aligned_steps;
use crate::error::{ensure, Result};
use crate::formats::content_hash;
use crate::neuralop::{rollout, trapezoid_weights, Model};

/// Per-sample test errors and their summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `"model"` or `"constant_baseline"`.
    pub predictor: String,
    pub task_hash: String,
    pub model_hash: Option<String>,
    pub errors: Vec<f64>,
    #[serde(flatten)]
    pub summary: Summary,
    pub baseline_errors: Option<Vec<f64>>,
    pub baseline: Option<Summary>,
    /// `100·(1 − mean/baseline mean)`.
    pub improvement_percent: Option<f64>,
    pub runtime_seconds: f64,
}

impl EvalReport {
    fn from_errors(predictor: &str, data: &Dataset, errors: Vec<f64>, start: Instant) -> Result<Self> {
        Ok(EvalReport {
            predictor: predictor.into(),
            task_hash: data.task.hash()?,
            model_hash: None,
            summary: Summary::of(&errors)?,
            errors,
            baseline_errors: None,
            baseline: None,
            improvement_percent: None,
            runtime_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Attaches a reference predictor's errors and the relative improvement.
    pub fn with_baseline(mut self, baseline: &EvalReport) -> Self {
        self.improvement_percent = Some(improvement(self.summary.mean, baseline.summary.mean));
        self.baseline = Some(baseline.summary);
        self.baseline_errors = Some(baseline.errors.clone());
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per test sample.
    pub fn errors_csv(&self) -> String {
        let mut s = String::from("sample,error");
        if self.baseline_errors.is_some() {
            s += ",baseline_error";
        }
        s.push('\n');
        for (j, e) in self.errors.iter().enumerate() {
            s += &format!("{j},{e:.12e}");
            if let Some(b) = &self.baseline_errors {
                s += &format!(",{:.12e}", b[j]);
            }
            s.push('\n');
        }
        s
    }
}

pub fn improvement(model_mean: f64, baseline_mean: f64) -> f64 {
    100.0 * (1.0 - model_mean / baseline_mean)
}

/// Scores an arbitrary predictor: `predict(j)` returns the prediction for
/// sample `j` on the task's output grid.
pub fn evaluate_predictions<F>(label: &str, data: &Dataset, predict: F) -> Result<EvalReport>
where
    F: Fn(usize) -> Result<Array2<f64>> + Sync,
{
    let start = Instant::now();
    let w = trapezoid_weights(&data.task.output_grid().normalized())?;
    let errors = (0..data.len())
        .into_par_iter()
        .map(|j| weighted_relative_l2(predict(j)?.view(), data.output(j), &w))
        .collect::<Result<Vec<f64>>>()?;
    EvalReport::from_errors(label, data, errors, start)
}

/// Relative L² error of `model` on every sample of `data`. Forecasting
/// reports also carry the constant-forecast baseline.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalReport> {
    let start = Instant::now();
    data.validate()?;
    check_compatible(model, data)?;
    let mut report = evaluate_predictions("model", data, |j| model.predict(data.input(j)))?;
    report.model_hash = Some(content_hash(model.config())?);
    if data.task.task == Task::Forecasting {
        report = report.with_baseline(&constant_baseline(data)?);
    }
    report.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Errors of predicting the last observed value for the whole forecast window.
pub fn constant_baseline(data: &Dataset) -> Result<EvalReport> {
    ensure!(data.task.task == Task::Forecasting, Usage, "the constant baseline applies to forecasting tasks only");
    evaluate_predictions("constant_baseline", data, |j| {
        let input = data.input(j);
        let last = input.row(input.nrows() - 1);
        Ok(Array2::from_shape_fn(data.output(j).dim(), |(_, c)| last[c]))
    })
}

/// Distribution of rolled-out forecasts against the true continuation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub windows: usize,
    pub samples_used: usize,
    /// Samples dropped because the rollout produced non-finite values.
    pub diverged: usize,
    #[serde(flatten)]
    pub histograms: HistogramPair,
    pub overlap: f64,
    pub wasserstein: f64,
}

impl RolloutStats {
    pub fn histogram_csv(&self) -> String {
        let h = &self.histograms;
        let mut s = String::from("bin_lo,bin_hi,pred,truth\n");
        for b in 0..h.pred.len() {
            s += &format!("{:.9e},{:.9e},{:.9e},{:.9e}\n", h.edges[b], h.edges[b + 1], h.pred[b], h.truth[b]);
        }
        s
    }
}

/// Rolls the forecaster out `windows` times from the input window of each of
/// the first `max_samples` test samples and pools every predicted value
/// (all channels) against the matching stretch of the true trajectory.
pub fn rollout_stats(model: &Model, data: &Dataset, windows: usize, bins: usize, max_samples: usize) -> Result<RolloutStats> {
    ensure!(windows >= 1 && max_samples >= 1, Usage, "need at least one window and one sample");
    ensure!(data.task.task == Task::Forecasting, Usage, "rollout statistics need a forecasting dataset");
    check_compatible(model, data)?;
    let task = &data.task;
    let go = task.output_grid();
    let tau = go.t1 - go.t0;
    let tb = task.input_window[1];
    let row_b = aligned_steps(tb, task.dt)?;
    let count = max_samples.min(data.len());

    let runs = (0..count)
        .into_par_iter()
        .map(|j| -> Result<Option<(Vec<f64>, Vec<f64>)>> {
            let r = rollout(model, data.input(j), windows)?;
            if r.diverged_at.is_some() {
                return Ok(None);
            }
            let truth = data.observed_trajectory(j, tb + windows as f64 * tau)?;
            let n = r.values.nrows();
            ensure!(truth.nrows() >= row_b + 1 + n, Shape, "true continuation is shorter than the rollout");
            let t = truth.slice(s![row_b + 1..row_b + 1 + n, ..]);
            Ok(Some((r.values.iter().copied().collect(), t.iter().copied().collect())))
        })
        .collect::<Result<Vec<_>>>()?;

    let diverged = runs.iter().filter(|r| r.is_none()).count();
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for (p, t) in runs.into_iter().flatten() {
        pred.extend(p);
        truth.extend(t);
    }
    ensure!(!pred.is_empty(), Numerical, "every rollout diverged ({diverged} of {count})");
    let histograms = HistogramPair::new(&pred, &truth, bins)?;
    Ok(RolloutStats {
        windows,
        samples_used: count - diverged,
        diverged,
        overlap: histograms.overlap(),
        wasserstein: wasserstein1(&pred, &truth)?,
        histograms,
    })
}
