//! Reverse-mode tape. Nodes are appended in evaluation order, so the node
//! index is already a topological order and backward is a single reverse sweep.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, matmul_raw, Tensor};
use crate::error::{ensure, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Tanh approximation of GELU.
    Gelu,
    Tanh,
    /// `x · sigmoid(x)`
    Silu,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    RowScale(Var, Rc<Vec<f64>>),
    Scale(Var, f64),
    Concat(Vec<Var>),
    SliceCols { a: Var, start: usize },
    Transpose(Var),
    Act(Var, Activation),
    Exp(Var),
    Sqrt(Var),
    Sum { a: Var, axis: usize },
    Mean { a: Var, axis: usize },
    SumAll(Var),
    WeightedSoftmax { s: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// `exp(x)` for `x ≤ 0`, written so the loop vectorises. Cody–Waite
/// reduction `x = n ln2 + r` with `|r| ≤ ln2/2`, then a degree-12 Taylor
/// polynomial; relative error stays below 1e-15. Arguments under -708
/// flush to zero.
#[inline(always)]
fn exp_nonpositive_body(xs: &mut [f64]) {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFTER: f64 = 6_755_399_441_055_744.0; // 1.5 · 2^52
    const C: [f64; 13] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
        1.0 / 479_001_600.0,
    ];
    for x in xs.iter_mut() {
        let v = x.max(-708.0);
        // The low mantissa bits of `t` hold n = round(v / ln2).
        let t = v * LOG2E + SHIFTER;
        let n = t - SHIFTER;
        let r = (v - n * LN2_HI) - n * LN2_LO;
        let mut p = C[12];
        for k in (0..12).rev() {
            p = p * r + C[k];
        }
        let scale = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
        let keep = if *x >= -708.0 { 1.0 } else { 0.0 };
        *x = p * scale * keep;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn exp_nonpositive_avx2(xs: &mut [f64]) {
    exp_nonpositive_body(xs)
}

fn exp_nonpositive(xs: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            return unsafe { exp_nonpositive_avx2(xs) };
        }
    }
    exp_nonpositive_body(xs)
}

fn row_softmax_weighted(row: &mut [f64], w: &[f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.iter_mut().for_each(|s| *s -= max);
    exp_nonpositive(row);
    let mut total = 0.0;
    for (s, &wi) in row.iter_mut().zip(w) {
        *s *= wi;
        total += *s;
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|p| *p *= inv);
}

/// `dS = P ⊙ (dP − rowsum(P ⊙ dP))`, written into `dp`.
fn softmax_backward_rows(p: &[f64], dp: &mut [f64], cols: usize) {
    for (prow, drow) in p.chunks_exact(cols).zip(dp.chunks_exact_mut(cols)) {
        let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
        for (d, &pv) in drow.iter_mut().zip(prow) {
            *d = pv * (*d - dot);
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients will be reported for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert!(!self.consumed, "tape values are freed by backward()");
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("tape already consumed by backward(); rebuild the forward pass".into()));
        }
        Ok(())
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        self.live()?;
        let out = matmul_raw(self.val(a), ta, self.val(b), tb)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, ng))
    }

    /// `x · Wᵀ + bias` with `W: [out × in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, false, w, true)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.val(a).shape() == self.val(b).shape(),
            Shape,
            "{what}: shapes {:?} and {:?} differ",
            self.val(a).shape(),
            self.val(b).shape()
        );
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<Var> {
        self.live()?;
        self.same_shape(a, b, what)?;
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    fn row_broadcast(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<Var> {
        self.live()?;
        let (rows, cols) = self.val(a).dims2()?;
        ensure!(
            self.val(b).shape() == [cols],
            Shape,
            "{what}: row vector has shape {:?}, expected [{cols}]",
            self.val(b).shape()
        );
        let (ta, tb) = (self.val(a), self.val(b));
        let mut data = Vec::with_capacity(rows * cols);
        for row in ta.data().chunks_exact(cols.max(1)).take(rows) {
            data.extend(row.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)));
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, op, ng))
    }

    /// Adds the vector `b: [n]` to every row of `a: [m × n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, |x, y| x + y, Op::AddRow(a, b), "add_row")
    }

    /// Multiplies every row of `a: [m × n]` elementwise by `b: [n]`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, |x, y| x * y, Op::MulRow(a, b), "mul_row")
    }

    /// Scales row `i` of `a` by the constant `w[i]`.
    pub fn row_scale(&mut self, a: Var, w: Rc<Vec<f64>>) -> Result<Var> {
        self.live()?;
        let (rows, cols) = self.val(a).dims2()?;
        ensure!(w.len() == rows, Shape, "row_scale: {} weights for {rows} rows", w.len());
        let mut out = self.val(a).clone();
        for (row, &wi) in out.data_mut().chunks_exact_mut(cols.max(1)).zip(w.iter()) {
            row.iter_mut().for_each(|x| *x *= wi);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::RowScale(a, w), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.live()?;
        let out = self.val(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Scale(a, s), ng))
    }

    /// Concatenation of matrices along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.live()?;
        ensure!(!parts.is_empty(), Shape, "concat of nothing");
        let rows = self.val(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.val(p).dims2()?;
            ensure!(r == rows, Shape, "concat: row counts {r} and {rows} differ");
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.val(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let ng = self.ng(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.live()?;
        let (rows, cols) = self.val(a).dims2()?;
        ensure!(start <= end && end <= cols, Shape, "slice {start}..{end} out of {cols} columns");
        let src = self.val(a).data();
        let mut data = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            data.extend_from_slice(&src[i * cols + start..i * cols + end]);
        }
        let out = Tensor::new(vec![rows, end - start], data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::SliceCols { a, start }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.live()?;
        let out = transpose(self.val(a))?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        self.live()?;
        let out = self.val(a).map(|x| act.apply(x));
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Act(a, act), ng))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.live()?;
        let out = self.val(a).map(f64::exp);
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Exp(a), ng))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.live()?;
        ensure!(self.val(a).data().iter().all(|&x| x >= 0.0), Domain, "sqrt of a negative value");
        let out = self.val(a).map(f64::sqrt);
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Sqrt(a), ng))
    }

    fn reduce(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        self.live()?;
        let (rows, cols) = self.val(a).dims2()?;
        ensure!(axis < 2, Shape, "axis {axis} out of range for a matrix");
        let src = self.val(a).data();
        let out = if axis == 0 {
            let mut acc = vec![0.0; cols];
            for row in src.chunks_exact(cols.max(1)).take(rows) {
                acc.iter_mut().zip(row).for_each(|(s, x)| *s += x);
            }
            if mean {
                acc.iter_mut().for_each(|s| *s /= rows as f64);
            }
            Tensor::vector(acc)
        } else {
            Tensor::vector(
                (0..rows)
                    .map(|i| {
                        let s: f64 = src[i * cols..(i + 1) * cols].iter().sum();
                        if mean {
                            s / cols as f64
                        } else {
                            s
                        }
                    })
                    .collect(),
            )
        };
        let ng = self.ng(&[a]);
        let op = if mean { Op::Mean { a, axis } } else { Op::Sum { a, axis } };
        Ok(self.push(out, op, ng))
    }

    /// Sum of a matrix over `axis` (0: over rows, 1: over columns).
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.live()?;
        let s: f64 = self.val(a).data().iter().sum();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a), ng))
    }

    /// Quadrature-weighted softmax along the last axis:
    /// `p_j = w_j exp(s_j − max s) / Σ_l w_l exp(s_l − max s)`.
    pub fn weighted_softmax(&mut self, scores: Var, weights: &[f64]) -> Result<Var> {
        self.live()?;
        let t = self.val(scores);
        let cols = *t.shape().last().ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        ensure!(weights.len() == cols, Shape, "softmax: {} weights for {cols} entries", weights.len());
        ensure!(weights.iter().all(|&w| w > 0.0 && w.is_finite()), Domain, "softmax weights must be positive");
        ensure!(t.is_finite(), Numerical, "non-finite attention scores");
        let mut out = t.clone();
        for row in out.data_mut().chunks_exact_mut(cols) {
            row_softmax_weighted(row, weights);
        }
        let ng = self.ng(&[scores]);
        Ok(self.push(out, Op::WeightedSoftmax { s: scores }, ng))
    }

    /// Layer normalisation over the last axis followed by the affine map `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.live()?;
        let (rows, cols) = self.val(x).dims2()?;
        ensure!(self.val(gamma).shape() == [cols], Shape, "layer_norm: γ shape {:?}", self.val(gamma).shape());
        ensure!(self.val(beta).shape() == [cols], Shape, "layer_norm: β shape {:?}", self.val(beta).shape());
        let src = self.val(x).data();
        let g = self.val(gamma).data();
        let b = self.val(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &src[i * cols..(i + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..cols {
                let h = (row[j] - mu) * is;
                xhat[i * cols + j] = h;
                out[i * cols + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    /// Multihead quadrature-weighted attention.
    ///
    /// `q: [Nq × dK]`, `k: [Nk × dK]`, `v: [Nk × dV]`, `weights: [Nk]`. Head `h`
    /// uses column block `h` of each operand; head outputs are concatenated
    /// into `[Nq × dV]`. Row `i` of head `h` is `Σ_j π_ij V_h(y_j)` with
    /// `π_ij ∝ w_j exp(⟨Q_h(x_i), K_h(y_j)⟩)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, weights: &[f64], heads: usize) -> Result<Var> {
        self.live()?;
        let (nq, dk) = self.val(q).dims2()?;
        let (nk, dk2) = self.val(k).dims2()?;
        let (nv, dv) = self.val(v).dims2()?;
        ensure!(dk == dk2, Shape, "attention: query width {dk} vs key width {dk2}");
        ensure!(nk == nv, Shape, "attention: {nk} keys vs {nv} values");
        ensure!(weights.len() == nk, Shape, "attention: {} weights for {nk} points", weights.len());
        ensure!(heads >= 1 && dk % heads == 0 && dv % heads == 0, Shape, "attention: widths {dk}/{dv} not divisible by {heads} heads");
        ensure!(weights.iter().all(|&w| w > 0.0 && w.is_finite()), Domain, "attention weights must be positive");
        let (dkh, dvh) = (dk / heads, dv / heads);
        let (qd, kd, vd) = (self.val(q).data(), self.val(k).data(), self.val(v).data());
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * dv];
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            gemm(nq, dkh, nk, &qd[h * dkh..], dk, 1, &kd[h * dkh..], 1, dk, 0.0, p, nk, 1);
            if !p.iter().all(|x| x.is_finite()) {
                return Err(Error::Numerical("non-finite attention scores".into()));
            }
            for row in p.chunks_exact_mut(nk) {
                row_softmax_weighted(row, weights);
            }
            gemm(nq, nk, dvh, p, nk, 1, &vd[h * dvh..], dv, 1, 0.0, &mut out[h * dvh..], dv, 1);
        }
        let out = Tensor::new(vec![nq, dv], out)?;
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, ng))
    }

    /// Reverse sweep from a scalar. The tape is consumed; a second call errors.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.live()?;
        ensure!(self.val(loss).len() == 1, Usage, "backward needs a scalar loss, got shape {:?}", self.val(loss).shape());
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.val(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads)?;
        }
        // Keep only leaf gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.consumed = true;
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, t: Tensor| {
            if self.nodes[v.0].needs_grad {
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.val(a), self.val(b));
                if self.nodes[a.0].needs_grad {
                    let da = if ta { matmul_raw(bv, tb, g, true)? } else { matmul_raw(g, false, bv, !tb)? };
                    acc(a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let db = if tb { matmul_raw(g, true, av, ta)? } else { matmul_raw(av, !ta, g, false)? };
                    acc(b, db);
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                acc(a, elementwise(g, bv, |x, y| x * y));
                acc(b, elementwise(g, av, |x, y| x * y));
            }
            &Op::AddRow(a, b) => {
                acc(a, g.clone());
                acc(b, column_sums(g));
            }
            &Op::MulRow(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let cols = bv.len();
                if self.nodes[a.0].needs_grad {
                    let mut da = g.clone();
                    for row in da.data_mut().chunks_exact_mut(cols.max(1)) {
                        row.iter_mut().zip(bv.data()).for_each(|(x, y)| *x *= y);
                    }
                    acc(a, da);
                }
                if self.nodes[b.0].needs_grad {
                    acc(b, column_sums(&elementwise(g, av, |x, y| x * y)));
                }
            }
            Op::RowScale(a, w) => {
                let cols = g.shape()[1];
                let mut da = g.clone();
                for (row, &wi) in da.data_mut().chunks_exact_mut(cols.max(1)).zip(w.iter()) {
                    row.iter_mut().for_each(|x| *x *= wi);
                }
                acc(*a, da);
            }
            &Op::Scale(a, s) => acc(a, g.map(|x| x * s)),
            Op::Concat(parts) => {
                let (rows, total) = g.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let w = self.val(p).shape()[1];
                    if self.nodes[p.0].needs_grad {
                        let mut d = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            d.extend_from_slice(&g.data()[i * total + off..i * total + off + w]);
                        }
                        acc(p, Tensor::new(vec![rows, w], d)?);
                    }
                    off += w;
                }
            }
            &Op::SliceCols { a, start } => {
                let (rows, cols) = self.val(a).dims2()?;
                let w = g.shape()[1];
                let mut d = Tensor::zeros(&[rows, cols]);
                for i in 0..rows {
                    d.data_mut()[i * cols + start..i * cols + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                acc(a, d);
            }
            &Op::Transpose(a) => acc(a, transpose(g)?),
            &Op::Act(a, act) => acc(a, elementwise(g, self.val(a), |d, x| d * act.derivative(x))),
            &Op::Exp(a) => acc(a, elementwise(g, &node.value, |d, y| d * y)),
            &Op::Sqrt(a) => acc(a, elementwise(g, &node.value, |d, y| d * 0.5 / y)),
            &Op::Sum { a, axis } | &Op::Mean { a, axis } => {
                let (rows, cols) = self.val(a).dims2()?;
                let scale = match node.op {
                    Op::Mean { .. } => 1.0 / if axis == 0 { rows } else { cols } as f64,
                    _ => 1.0,
                };
                let d = Tensor::from_fn(&[rows, cols], |e| {
                    let (i, j) = (e / cols, e % cols);
                    scale * if axis == 0 { g.data()[j] } else { g.data()[i] }
                });
                acc(a, d);
            }
            &Op::SumAll(a) => acc(a, Tensor::full(self.val(a).shape(), g.item())),
            &Op::WeightedSoftmax { s } => {
                let cols = *g.shape().last().unwrap();
                let mut d = g.clone();
                softmax_backward_rows(node.value.data(), d.data_mut(), cols);
                acc(s, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (rows, cols) = g.dims2()?;
                let gam = self.val(*gamma).data();
                let gd = g.data();
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let r = i * cols..(i + 1) * cols;
                        let (gr, hr) = (&gd[r.clone()], &xhat[r.clone()]);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..cols {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for j in 0..cols {
                            let dh = gr[j] * gam[j];
                            dx[i * cols + j] = inv_std[i] * (dh - m1 - hr[j] * m2);
                        }
                    }
                    acc(*x, Tensor::new(vec![rows, cols], dx)?);
                }
                if self.nodes[gamma.0].needs_grad {
                    let mut dg = vec![0.0; cols];
                    for (gr, hr) in gd.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        dg.iter_mut().zip(gr.iter().zip(hr)).for_each(|(s, (a, b))| *s += a * b);
                    }
                    acc(*gamma, Tensor::vector(dg));
                }
                acc(*beta, column_sums(g));
            }
            &Op::Attention { q, k, v, heads, ref probs } => {
                let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
                let (nq, dk) = qv.dims2()?;
                let (nk, dv) = vv.dims2()?;
                let (dkh, dvh) = (dk / heads, dv / heads);
                let gd = g.data();
                let mut dq = vec![0.0; nq * dk];
                let mut dkk = vec![0.0; nk * dk];
                let mut dvv = vec![0.0; nk * dv];
                let mut dp = vec![0.0; nq * nk];
                for h in 0..heads {
                    let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                    // dV_h = Pᵀ dO_h
                    gemm(nk, nq, dvh, p, 1, nk, &gd[h * dvh..], dv, 1, 0.0, &mut dvv[h * dvh..], dv, 1);
                    // dP = dO_h V_hᵀ
                    gemm(nq, dvh, nk, &gd[h * dvh..], dv, 1, &vv.data()[h * dvh..], 1, dv, 0.0, &mut dp, nk, 1);
                    softmax_backward_rows(p, &mut dp, nk);
                    // dQ_h = dS K_h ; dK_h = dSᵀ Q_h
                    gemm(nq, nk, dkh, &dp, nk, 1, &kv.data()[h * dkh..], dk, 1, 0.0, &mut dq[h * dkh..], dk, 1);
                    gemm(nk, nq, dkh, &dp, 1, nk, &qv.data()[h * dkh..], dk, 1, 0.0, &mut dkk[h * dkh..], dk, 1);
                }
                acc(q, Tensor::new(vec![nq, dk], dq)?);
                acc(k, Tensor::new(vec![nk, dk], dkk)?);
                acc(v, Tensor::new(vec![nk, dv], dvv)?);
            }
        }
        Ok(())
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn column_sums(g: &Tensor) -> Tensor {
    let cols = g.shape()[1];
    let mut acc = vec![0.0; cols];
    for row in g.data().chunks_exact(cols.max(1)) {
        acc.iter_mut().zip(row).for_each(|(s, x)| *s += x);
    }
    Tensor::vector(acc)
}

fn transpose(t: &Tensor) -> Result<Tensor> {
    let (r, c) = t.dims2()?;
    Ok(Tensor::from_fn(&[c, r], |e| t.data()[(e % r) * c + e / r]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_matches_libm() {
        let mut xs: Vec<f64> = (0..20_000).map(|i| -(i as f64) * 0.0371).collect();
        xs.extend([0.0, -1e-300, -707.9, -708.5, -1e6, f64::NEG_INFINITY]);
        let want: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        exp_nonpositive(&mut xs);
        for (got, want) in xs.iter().zip(&want) {
            if *want < 1e-300 {
                assert!(*got < 1e-300);
            } else {
                assert!(((got - want) / want).abs() < 2e-15, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let s = t.sum_all(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_twice_is_usage_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0]));
        let s = t.sum_all(x).unwrap();
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::Usage(_))));
        assert!(matches!(t.scale(x, 2.0), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn uniform_softmax() {
        let mut t = Tape::new();
        let s = t.constant(Tensor::full(&[2, 5], 3.7));
        let p = t.weighted_softmax(s, &[0.2; 5]).unwrap();
        for &v in t.value(p).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_huge_scores() {
        let mut t = Tape::new();
        let s = t.constant(Tensor::vector(vec![1000.0, 999.0, -1000.0]));
        let p = t.weighted_softmax(s, &[1.0, 1.0, 1.0]).unwrap();
        let v = t.value(p).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_standardises() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(2, 4, vec![1., 2., 3., 10., -5., 0., 5., 7.]).unwrap());
        let g = t.constant(Tensor::full(&[4], 1.0));
        let b = t.constant(Tensor::zeros(&[4]));
        let y = t.layer_norm(x, g, b, 0.0).unwrap();
        for row in t.value(y).data().chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn no_silent_broadcast() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.add(a, b), Err(Error::Shape(_))));
        let r = t.constant(Tensor::zeros(&[2]));
        assert!(matches!(t.add_row(a, r), Err(Error::Shape(_))));
    }
}
