use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::neuralop::GridFunction;

/// `sqrt(Σ_i w_i |a_i − b_i|²) / sqrt(Σ_i w_i |b_i|²)` over rows `i`, with all
/// channels of a row flattened together.
pub fn weighted_relative_l2(pred: ArrayView2<f64>, truth: ArrayView2<f64>, weights: &[f64]) -> Result<f64> {
    ensure!(pred.dim() == truth.dim(), Shape, "prediction {:?} vs truth {:?}", pred.dim(), truth.dim());
    ensure!(weights.len() == truth.nrows(), Shape, "{} weights for {} rows", weights.len(), truth.nrows());
    let (mut num, mut den) = (0.0, 0.0);
    for ((p, t), w) in pred.rows().into_iter().zip(truth.rows()).zip(weights) {
        num += w * p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        den += w * t.iter().map(|b| b * b).sum::<f64>();
    }
    ensure!(den > 0.0, Domain, "relative error is undefined for an identically zero truth");
    Ok((num / den).sqrt())
}

/// Relative L² error between two functions on the same grid.
pub fn relative_l2(pred: &GridFunction, truth: &GridFunction) -> Result<f64> {
    ensure!(pred.grid == truth.grid, Shape, "prediction and truth live on different grids");
    weighted_relative_l2(pred.values.view(), truth.values.view(), &truth.weights)
}

/// Mean, median, population standard deviation and range of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        ensure!(!values.is_empty(), Usage, "summary of an empty sample");
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let k = sorted.len();
        let median = if k % 2 == 1 { sorted[k / 2] } else { 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]) };
        Ok(Summary { mean, median, std, min: sorted[0], max: sorted[k - 1] })
    }
}

/// Pointwise `|pred − truth|` divided by the spatial RMS of the truth at
/// each time (row).
pub fn spatiotemporal_error_field(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<Array2<f64>> {
    ensure!(pred.dim() == truth.dim(), Shape, "prediction {:?} vs truth {:?}", pred.dim(), truth.dim());
    let mut out = Array2::zeros(truth.dim());
    for (i, (p, t)) in pred.rows().into_iter().zip(truth.rows()).enumerate() {
        let rms = (t.iter().map(|v| v * v).sum::<f64>() / t.len().max(1) as f64).sqrt();
        if rms <= 0.0 {
            return Err(Error::Domain(format!("truth has zero RMS at time index {i}")));
        }
        for (o, (a, b)) in out.row_mut(i).iter_mut().zip(p.iter().zip(t.iter())) {
            *o = (a - b).abs() / rms;
        }
    }
    Ok(out)
}

/// Histograms of two samples on shared bins spanning the range of `truth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramPair {
    pub edges: Vec<f64>,
    pub pred: Vec<f64>,
    pub truth: Vec<f64>,
    /// Predicted values that fell outside the truth range and were clipped.
    pub outliers: usize,
}

impl HistogramPair {
    pub fn new(pred: &[f64], truth: &[f64], bins: usize) -> Result<Self> {
        ensure!(bins >= 1, Usage, "need at least one bin");
        ensure!(!pred.is_empty() && !truth.is_empty(), Usage, "histogram of an empty sample");
        ensure!(pred.iter().chain(truth).all(|v| v.is_finite()), Numerical, "non-finite values in histogram input");
        let lo = truth.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            hi = lo + 1.0;
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + i as f64 * width }).collect();
        let bin_of = |v: f64| (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        let mut h_true = vec![0.0; bins];
        for &v in truth {
            h_true[bin_of(v)] += 1.0;
        }
        let mut h_pred = vec![0.0; bins];
        let mut outliers = 0;
        for &v in pred {
            if v < lo || v > hi {
                outliers += 1;
            }
            h_pred[bin_of(v.clamp(lo, hi))] += 1.0;
        }
        let (np, nt) = (pred.len() as f64, truth.len() as f64);
        h_pred.iter_mut().for_each(|m| *m /= np);
        h_true.iter_mut().for_each(|m| *m /= nt);
        Ok(HistogramPair { edges, pred: h_pred, truth: h_true, outliers })
    }

    /// `Σ_b min(h_pred(b), h_truth(b))`, 1 for identical and 0 for disjoint histograms.
    pub fn overlap(&self) -> f64 {
        self.pred.iter().zip(&self.truth).map(|(a, b)| a.min(*b)).sum()
    }
}

/// 1-Wasserstein distance between two empirical distributions on ℝ,
/// `∫ |F_a − F_b| dx`.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(!a.is_empty() && !b.is_empty(), Usage, "Wasserstein distance of an empty sample");
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = xa[0].min(xb[0]);
    let mut total = 0.0;
    while i < xa.len() || j < xb.len() {
        let next = match (xa.get(i), xb.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < xa.len() && xa[i] == next {
            i += 1;
        }
        while j < xb.len() && xb[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}
