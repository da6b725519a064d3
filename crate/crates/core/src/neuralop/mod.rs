//! Transformer-style neural operators acting on functions sampled on grids.
//!
//! Attention here is a quadrature approximation of an integral operator:
//! for a query point `x` the output is `Σ_j π(x, y_j) V u(y_j)` with
//! `π(x, y_j) ∝ w_j exp(⟨Q v(x), K u(y_j)⟩)` and `w_j` the trapezoid weights
//! of the key grid, so the result does not depend on how densely the input
//! is sampled.

mod grid;
mod model;

use ndarray::{Array2, ArrayView2};

pub use grid::{normalize_times, trapezoid_weights, GridFunction};
pub use model::{relative_l2_on_tape, Architecture, Model, ModelConfig, Normalizer};

use crate::autodiff::{Tape, Tensor};
use crate::error::{ensure, Error, Result};

/// Linear maps of one attention block: `q: [dK × d_v]`, `k: [dK × d_u]`,
/// `v: [dV × d_u]`.
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub heads: usize,
}

fn gf_tensor(f: &GridFunction) -> Result<Tensor> {
    Tensor::matrix(f.len(), f.channels(), f.values.iter().copied().collect())
}

/// Attention density `π(x_i, ·)` of every head over the grid of `u`,
/// normalised so that `Σ_j π_j = 1` (the quadrature weights are folded in).
/// Returns `[heads × N_u]`.
pub fn attention_density(v: &GridFunction, u: &GridFunction, maps: &AttentionMaps, query_index: usize) -> Result<Array2<f64>> {
    ensure!(query_index < v.len(), Shape, "query index {query_index} outside a grid of {}", v.len());
    let mut tape = Tape::new();
    let vt = tape.constant(gf_tensor(v)?);
    let ut = tape.constant(gf_tensor(u)?);
    let qm = tape.constant(maps.q.clone());
    let km = tape.constant(maps.k.clone());
    let q = tape.linear(vt, qm, None)?;
    let k = tape.linear(ut, km, None)?;
    let (_, dk) = tape.value(q).dims2()?;
    ensure!(maps.heads >= 1 && dk % maps.heads == 0, Shape, "{dk} key channels for {} heads", maps.heads);
    let dh = dk / maps.heads;
    let (qv, kv) = (tape.value(q).data(), tape.value(k).data());
    let n = u.len();
    let mut out = Array2::zeros((maps.heads, n));
    for h in 0..maps.heads {
        let qi = &qv[query_index * dk + h * dh..query_index * dk + (h + 1) * dh];
        let scores: Vec<f64> = (0..n)
            .map(|j| qi.iter().zip(&kv[j * dk + h * dh..j * dk + (h + 1) * dh]).map(|(a, b)| a * b).sum())
            .collect();
        ensure!(scores.iter().all(|s| s.is_finite()), Numerical, "non-finite attention scores");
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in 0..n {
            let e = u.weights[j] * (scores[j] - max).exp();
            out[[h, j]] = e;
            total += e;
        }
        out.row_mut(h).mapv_inplace(|p| p / total);
    }
    Ok(out)
}

/// Multihead cross-attention from `v` (queries) into `u` (keys and values),
/// returned on the grid of `v`. Head outputs are concatenated.
pub fn cross_attention(v: &GridFunction, u: &GridFunction, maps: &AttentionMaps) -> Result<GridFunction> {
    let mut tape = Tape::new();
    let vt = tape.constant(gf_tensor(v)?);
    let ut = tape.constant(gf_tensor(u)?);
    let qm = tape.constant(maps.q.clone());
    let km = tape.constant(maps.k.clone());
    let vm = tape.constant(maps.v.clone());
    let q = tape.linear(vt, qm, None)?;
    let k = tape.linear(ut, km, None)?;
    let val = tape.linear(ut, vm, None)?;
    let a = tape.attention(q, k, val, &u.weights, maps.heads)?;
    let values = model::to_array(tape.value(a))?;
    Ok(GridFunction { grid: v.grid.clone(), weights: v.weights.clone(), values })
}

/// Smoother `Ψ: p|[0,T] ↦ (prediction on the same grid)`.
pub fn forward_smoother(p_in: &GridFunction, model: &Model) -> Result<GridFunction> {
    ensure!(model.config().arch == Architecture::SelfAttnStack, Config, "forward_smoother needs a self-attention stack");
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let y = model.forward_on(&mut tape, &vars, p_in.values.view(), (&p_in.grid, &p_in.weights), None)?;
    let values = model::to_array(tape.value(y))?;
    Ok(GridFunction { grid: p_in.grid.clone(), weights: p_in.weights.clone(), values })
}

/// Forecaster evaluated on the query points `query`, given in the output
/// window's own normalised coordinate (`0` at its start, `1` at its end).
/// A self-attention stack can only answer on a query grid with as many
/// points as the input, which it maps one-to-one.
pub fn forward_forecaster(p_in: &GridFunction, query: &[f64], model: &Model) -> Result<GridFunction> {
    let qw = trapezoid_weights(query)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let q = match model.config().arch {
        Architecture::EncoderDecoder => Some((query, qw.as_slice())),
        Architecture::SelfAttnStack => {
            ensure!(
                query.len() == p_in.len(),
                Config,
                "a self-attention stack forecasts on {} points, got a query grid of {}",
                p_in.len(),
                query.len()
            );
            None
        }
    };
    let y = model.forward_on(&mut tape, &vars, p_in.values.view(), (&p_in.grid, &p_in.weights), q)?;
    let values = model::to_array(tape.value(y))?;
    GridFunction::new(query.to_vec(), values)
}

/// Result of an autoregressive rollout.
#[derive(Clone, Debug)]
pub struct Rollout {
    /// Physical times of the predicted samples.
    pub times: Vec<f64>,
    /// `[times.len() × channels]`
    pub values: Array2<f64>,
    /// Index of the first window whose prediction was not finite; the
    /// rollout stops there.
    pub diverged_at: Option<usize>,
}

/// Runs a forecaster `windows` times, each time feeding the most recent
/// history window back in. `history` is on the model's input grid.
///
/// The output window must start where the input window ends and use the
/// same spacing, so each step advances the history by `τ`.
pub fn rollout(model: &Model, history: ArrayView2<f64>, windows: usize) -> Result<Rollout> {
    let cfg = model.config();
    ensure!(cfg.in_channels == cfg.out_channels, Config, "rollout needs matching input and output channels");
    let (gi, go) = (cfg.input_grid, cfg.output_grid);
    ensure!(go.points >= 2, Config, "rollout needs an output window with at least two points");
    let tol = 1e-9 * gi.t1.abs().max(1.0);
    ensure!((go.t0 - gi.t1).abs() <= tol, Config, "output window must start at the end of the input window");
    ensure!((go.dt() - gi.dt()).abs() <= 1e-9 * gi.dt().max(1e-12), Config, "input and output spacing differ");
    ensure!(
        go.t1 - go.t0 <= gi.t1 - gi.t0 + tol,
        Config,
        "forecast horizon {} exceeds the input window length {}",
        go.t1 - go.t0,
        gi.t1 - gi.t0
    );
    ensure!(history.dim() == (gi.points, cfg.in_channels), Shape, "history has shape {:?}", history.dim());

    let d = cfg.out_channels;
    let new_pts = go.points - 1;
    let tau = go.t1 - go.t0;
    let mut window = history.to_owned();
    let mut times = Vec::with_capacity(windows * new_pts);
    let mut rows: Vec<f64> = Vec::with_capacity(windows * new_pts * d);
    let mut diverged_at = None;
    for w in 0..windows {
        let pred = match model.predict(window.view()) {
            Ok(p) if p.iter().all(|v| v.is_finite()) => p,
            Ok(_) | Err(Error::Numerical(_)) => {
                diverged_at = Some(w);
                break;
            }
            Err(e) => return Err(e),
        };
        for i in 1..go.points {
            times.push(go.t0 + w as f64 * tau + i as f64 * go.dt());
            rows.extend(pred.row(i).iter());
        }
        // Slide: drop the oldest `new_pts` rows and append the prediction.
        let n = gi.points;
        let mut next = Array2::zeros((n, d));
        let keep = n.saturating_sub(new_pts);
        for r in 0..keep {
            next.row_mut(r).assign(&window.row(r + new_pts));
        }
        for r in keep..n {
            next.row_mut(r).assign(&pred.row(r - keep + 1 + new_pts.saturating_sub(n)));
        }
        window = next;
    }
    let values = Array2::from_shape_vec((times.len(), d), rows).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(Rollout { times, values, diverged_at })
}
