use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::trapezoid_weights;
use crate::autodiff::{Activation, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::dynsys::TimeGrid;
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Lift, a stack of self-attention encoder layers, project. Output lives
    /// on the input grid.
    SelfAttnStack,
    /// Encoder stack followed by a decoder that cross-attends from a query
    /// grid to the encoded input.
    EncoderDecoder,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub layers: usize,
    pub channels: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub activation: Activation,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "default_true")]
    pub layer_norm: bool,
    pub input_grid: TimeGrid,
    pub output_grid: TimeGrid,
}

impl ModelConfig {
    pub fn new(arch: Architecture, in_channels: usize, out_channels: usize, input_grid: TimeGrid, output_grid: TimeGrid) -> Self {
        ModelConfig {
            arch,
            layers: 4,
            channels: 64,
            heads: 4,
            mlp_hidden: 128,
            activation: Activation::Gelu,
            in_channels,
            out_channels,
            layer_norm: true,
            input_grid,
            output_grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.layers >= 1, Config, "at least one encoder layer is required");
        ensure!(self.channels >= 1 && self.mlp_hidden >= 1, Config, "channel counts must be positive");
        ensure!(self.heads >= 1, Config, "at least one attention head is required");
        ensure!(
            self.channels.is_multiple_of(self.heads),
            Config,
            "{} channels do not split into {} heads",
            self.channels,
            self.heads
        );
        ensure!(self.in_channels >= 1 && self.out_channels >= 1, Config, "input and output need at least one channel");
        if self.arch == Architecture::SelfAttnStack {
            ensure!(
                self.input_grid.points == self.output_grid.points,
                Config,
                "a self-attention stack needs as many output points as input points; use encoder_decoder otherwise"
            );
        }
        Ok(())
    }
}

/// Per-channel affine standardisation of inputs and outputs, fitted on the
/// training split and stored with the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
}

fn channel_stats(a: &Array3<f64>) -> (Vec<f64>, Vec<f64>) {
    let d = a.len_of(Axis(2));
    let n = (a.len_of(Axis(0)) * a.len_of(Axis(1))).max(1) as f64;
    let mut mean = vec![0.0; d];
    let mut std = vec![1.0; d];
    for c in 0..d {
        let col = a.index_axis(Axis(2), c);
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean[c] = m;
        // A constant channel is left unscaled.
        std[c] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    (mean, std)
}

impl Normalizer {
    pub fn identity(in_channels: usize, out_channels: usize) -> Self {
        Normalizer {
            input_mean: vec![0.0; in_channels],
            input_std: vec![1.0; in_channels],
            output_mean: vec![0.0; out_channels],
            output_std: vec![1.0; out_channels],
        }
    }

    /// `inputs: [J × N_in × d_in]`, `outputs: [J × N_out × d_out]`.
    pub fn fit(inputs: &Array3<f64>, outputs: &Array3<f64>) -> Self {
        let (input_mean, input_std) = channel_stats(inputs);
        let (output_mean, output_std) = channel_stats(outputs);
        Normalizer { input_mean, input_std, output_mean, output_std }
    }

    pub fn normalize_input(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.input_mean[c]) / self.input_std[c];
            }
        }
        out
    }
}

enum Init {
    Uniform(usize),
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.channels;
    let h = cfg.mlp_hidden;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    let attn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        for m in ["q", "k", "v", "o"] {
            push(format!("{p}.{m}"), vec![c, c], Init::Uniform(c));
        }
        push(format!("{p}.o_bias"), vec![c], Init::Zeros);
    };
    let mlp = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.w1"), vec![h, c], Init::Uniform(c));
        push(format!("{p}.b1"), vec![h], Init::Zeros);
        push(format!("{p}.w2"), vec![c, h], Init::Uniform(h));
        push(format!("{p}.b2"), vec![c], Init::Zeros);
    };
    let ln = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        if cfg.layer_norm {
            push(format!("{p}.gamma"), vec![c], Init::Ones);
            push(format!("{p}.beta"), vec![c], Init::Zeros);
        }
    };

    push("lift.w".into(), vec![c, cfg.in_channels + 1], Init::Uniform(cfg.in_channels + 1));
    push("lift.b".into(), vec![c], Init::Zeros);
    for l in 0..cfg.layers {
        attn(&mut push, &format!("enc.{l}.attn"));
        ln(&mut push, &format!("enc.{l}.ln1"));
        mlp(&mut push, &format!("enc.{l}.mlp"));
        ln(&mut push, &format!("enc.{l}.ln2"));
    }
    if cfg.arch == Architecture::EncoderDecoder {
        push("dec.lift.w".into(), vec![c, 1], Init::Uniform(1));
        push("dec.lift.b".into(), vec![c], Init::Zeros);
        attn(&mut push, "dec.self");
        ln(&mut push, "dec.ln1");
        attn(&mut push, "dec.cross");
        ln(&mut push, "dec.ln2");
        mlp(&mut push, "dec.mlp");
        ln(&mut push, "dec.ln3");
    }
    push("proj.w".into(), vec![cfg.out_channels, c], Init::Uniform(c));
    push("proj.b".into(), vec![cfg.out_channels], Init::Zeros);
    out
}

/// Parameters, configuration and normalisation of one operator network.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
    pub normalizer: Normalizer,
    in_grid: Vec<f64>,
    in_weights: Vec<f64>,
    out_grid: Vec<f64>,
    out_weights: Vec<f64>,
}

impl Model {
    /// Fresh model with `uniform(±1/√fan_in)` weights, zero biases and unit
    /// layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in layout(&config) {
            let t = match init {
                Init::Uniform(fan_in) => {
                    let a = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(&shape, |_| rng.gen_range(-a..a))
                }
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, 1.0),
            };
            names.push(name);
            params.push(t);
        }
        let norm = Normalizer::identity(config.in_channels, config.out_channels);
        Self::assemble(config, names, params, norm)
    }

    /// Rebuilds a model from stored parts, checking names and shapes against
    /// the layout implied by `config`.
    pub fn from_parts(config: ModelConfig, names: Vec<String>, params: Vec<Tensor>, normalizer: Normalizer) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        ensure!(
            expected.len() == names.len() && names.len() == params.len(),
            Format,
            "parameter count {} does not match the configuration ({})",
            names.len(),
            expected.len()
        );
        for ((en, es, _), (n, p)) in expected.iter().zip(names.iter().zip(&params)) {
            ensure!(en == n, Format, "parameter `{n}` found where `{en}` was expected");
            ensure!(es.as_slice() == p.shape(), Format, "parameter `{n}` has shape {:?}, expected {es:?}", p.shape());
        }
        ensure!(
            normalizer.input_mean.len() == config.in_channels
                && normalizer.input_std.len() == config.in_channels
                && normalizer.output_mean.len() == config.out_channels
                && normalizer.output_std.len() == config.out_channels,
            Format,
            "normalisation statistics do not match the channel counts"
        );
        Self::assemble(config, names, params, normalizer)
    }

    fn assemble(config: ModelConfig, names: Vec<String>, params: Vec<Tensor>, normalizer: Normalizer) -> Result<Self> {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let in_grid = config.input_grid.normalized();
        let in_weights = trapezoid_weights(&in_grid)?;
        let out_grid = config.output_grid.normalized();
        let out_weights = trapezoid_weights(&out_grid)?;
        Ok(Model { config, names, params, index, normalizer, in_grid, in_weights, out_grid, out_weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Normalised input grid and its quadrature weights.
    pub fn input_quadrature(&self) -> (&[f64], &[f64]) {
        (&self.in_grid, &self.in_weights)
    }

    /// Normalised output grid and its quadrature weights.
    pub fn output_quadrature(&self) -> (&[f64], &[f64]) {
        (&self.out_grid, &self.out_weights)
    }

    /// Records every parameter on `tape`, trainable or not.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    fn p(&self, vars: &[Var], name: &str) -> Var {
        vars[self.index[name]]
    }

    /// `Wo · MHA(Wq x, Wk y, Wv y) + b` with quadrature weights of `y`'s grid.
    pub fn multihead(&self, tape: &mut Tape, vars: &[Var], prefix: &str, x: Var, y: Var, y_weights: &[f64]) -> Result<Var> {
        let q = tape.linear(x, self.p(vars, &format!("{prefix}.q")), None)?;
        let k = tape.linear(y, self.p(vars, &format!("{prefix}.k")), None)?;
        let v = tape.linear(y, self.p(vars, &format!("{prefix}.v")), None)?;
        let a = tape.attention(q, k, v, y_weights, self.config.heads)?;
        let o = self.p(vars, &format!("{prefix}.o"));
        let ob = self.p(vars, &format!("{prefix}.o_bias"));
        tape.linear(a, o, Some(ob))
    }

    fn mlp(&self, tape: &mut Tape, vars: &[Var], prefix: &str, x: Var) -> Result<Var> {
        let h = tape.linear(x, self.p(vars, &format!("{prefix}.w1")), Some(self.p(vars, &format!("{prefix}.b1"))))?;
        let h = tape.activation(h, self.config.activation)?;
        tape.linear(h, self.p(vars, &format!("{prefix}.w2")), Some(self.p(vars, &format!("{prefix}.b2"))))
    }

    fn residual(&self, tape: &mut Tape, vars: &[Var], ln: &str, x: Var, update: Var) -> Result<Var> {
        let s = tape.add(x, update)?;
        if !self.config.layer_norm {
            return Ok(s);
        }
        let g = self.p(vars, &format!("{ln}.gamma"));
        let b = self.p(vars, &format!("{ln}.beta"));
        tape.layer_norm(s, g, b, LAYER_NORM_EPS)
    }

    /// Pointwise lift of `(value, grid point)` to the hidden width.
    pub fn lift(&self, tape: &mut Tape, vars: &[Var], x: Var, grid: &[f64]) -> Result<Var> {
        let g = tape.constant(Tensor::matrix(grid.len(), 1, grid.to_vec())?);
        let xg = tape.concat(&[x, g])?;
        tape.linear(xg, self.p(vars, "lift.w"), Some(self.p(vars, "lift.b")))
    }

    /// `u ← LN(u + MHA(u, u))`, then `u ← LN(u + MLP(u))`.
    pub fn encoder_layer(&self, tape: &mut Tape, vars: &[Var], layer: usize, u: Var, weights: &[f64]) -> Result<Var> {
        let a = self.multihead(tape, vars, &format!("enc.{layer}.attn"), u, u, weights)?;
        let u = self.residual(tape, vars, &format!("enc.{layer}.ln1"), u, a)?;
        let m = self.mlp(tape, vars, &format!("enc.{layer}.mlp"), u)?;
        self.residual(tape, vars, &format!("enc.{layer}.ln2"), u, m)
    }

    /// Lifts the query times, then self-attention over the queries,
    /// cross-attention into the encoded input and an MLP, each with a
    /// residual connection.
    pub fn decoder_block(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        encoded: Var,
        in_weights: &[f64],
        query: &[f64],
        query_weights: &[f64],
    ) -> Result<Var> {
        ensure!(self.config.arch == Architecture::EncoderDecoder, Config, "this model has no decoder");
        let s = tape.constant(Tensor::matrix(query.len(), 1, query.to_vec())?);
        let v = tape.linear(s, self.p(vars, "dec.lift.w"), Some(self.p(vars, "dec.lift.b")))?;
        let a = self.multihead(tape, vars, "dec.self", v, v, query_weights)?;
        let v = self.residual(tape, vars, "dec.ln1", v, a)?;
        let a = self.multihead(tape, vars, "dec.cross", v, encoded, in_weights)?;
        let v = self.residual(tape, vars, "dec.ln2", v, a)?;
        let m = self.mlp(tape, vars, "dec.mlp", v)?;
        self.residual(tape, vars, "dec.ln3", v, m)
    }

    /// Pointwise projection to the output channels, returned in physical units.
    pub fn project(&self, tape: &mut Tape, vars: &[Var], h: Var) -> Result<Var> {
        let y = tape.linear(h, self.p(vars, "proj.w"), Some(self.p(vars, "proj.b")))?;
        let s = tape.constant(Tensor::vector(self.normalizer.output_std.clone()));
        let m = tape.constant(Tensor::vector(self.normalizer.output_mean.clone()));
        let y = tape.mul_row(y, s)?;
        tape.add_row(y, m)
    }

    /// Full forward pass on arbitrary grids. `input` is in physical units on
    /// `in_grid`; `query` is required for the encoder–decoder.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        input: ArrayView2<f64>,
        in_grid: (&[f64], &[f64]),
        query: Option<(&[f64], &[f64])>,
    ) -> Result<Var> {
        let (n, d) = input.dim();
        ensure!(d == self.config.in_channels, Shape, "input has {d} channels, model expects {}", self.config.in_channels);
        ensure!(n == in_grid.0.len(), Shape, "input has {n} rows for {} grid points", in_grid.0.len());
        ensure!(input.iter().all(|v| v.is_finite()), Numerical, "non-finite input");
        let x = self.normalizer.normalize_input(input);
        let x = tape.constant(Tensor::matrix(n, d, x.into_raw_vec_and_offset().0)?);
        let mut u = self.lift(tape, vars, x, in_grid.0)?;
        for l in 0..self.config.layers {
            u = self.encoder_layer(tape, vars, l, u, in_grid.1)?;
        }
        let h = match (self.config.arch, query) {
            (Architecture::SelfAttnStack, None) => u,
            (Architecture::SelfAttnStack, Some(_)) => {
                return Err(Error::Config("a self-attention stack cannot be queried on another grid".into()))
            }
            (Architecture::EncoderDecoder, Some((qg, qw))) => self.decoder_block(tape, vars, u, in_grid.1, qg, qw)?,
            (Architecture::EncoderDecoder, None) => return Err(Error::Config("the decoder needs a query grid".into())),
        };
        self.project(tape, vars, h)
    }

    /// Forward pass on the configured input and output grids.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], input: ArrayView2<f64>) -> Result<Var> {
        let query = match self.config.arch {
            Architecture::SelfAttnStack => None,
            Architecture::EncoderDecoder => Some((self.out_grid.as_slice(), self.out_weights.as_slice())),
        };
        self.forward_on(tape, vars, input, (&self.in_grid, &self.in_weights), query)
    }

    /// Inference without gradients.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let y = self.forward(&mut tape, &vars, input)?;
        to_array(tape.value(y))
    }

    /// Relative L² error of the prediction against `target`, differentiable
    /// through `tape`.
    pub fn loss(&self, tape: &mut Tape, vars: &[Var], input: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<Var> {
        let y = self.forward(tape, vars, input)?;
        relative_l2_on_tape(tape, y, target, &self.out_weights)
    }
}

pub(crate) fn to_array(t: &Tensor) -> Result<Array2<f64>> {
    let (r, c) = t.dims2()?;
    Array2::from_shape_vec((r, c), t.data().to_vec()).map_err(|e| Error::Shape(e.to_string()))
}

/// `sqrt(Σ_i w_i |ŷ_i − y_i|²) / sqrt(Σ_i w_i |y_i|²)`.
pub fn relative_l2_on_tape(tape: &mut Tape, pred: Var, target: ArrayView2<f64>, weights: &[f64]) -> Result<Var> {
    let (n, d) = target.dim();
    ensure!(tape.value(pred).shape() == [n, d], Shape, "prediction {:?} vs target [{n}, {d}]", tape.value(pred).shape());
    let mut denom = 0.0;
    for (row, w) in target.rows().into_iter().zip(weights) {
        denom += w * row.iter().map(|v| v * v).sum::<f64>();
    }
    ensure!(denom > 0.0, Domain, "relative error against an identically zero target");
    let t = tape.constant(Tensor::matrix(n, d, target.iter().copied().collect())?);
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    let sq = tape.row_scale(sq, Rc::new(weights.to_vec()))?;
    let s = tape.sum_all(sq)?;
    // Keeps the square root differentiable at an exact fit.
    let tiny = tape.constant(Tensor::scalar(1e-300));
    let s = tape.add(s, tiny)?;
    let r = tape.sqrt(s)?;
    tape.scale(r, 1.0 / denom.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::gradcheck;

    fn tiny(arch: Architecture) -> ModelConfig {
        let g = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let out = if arch == Architecture::SelfAttnStack { g } else { TimeGrid::new(1.0, 1.5, 5).unwrap() };
        let mut c = ModelConfig::new(arch, 2, 3, g, out);
        c.layers = 2;
        c.channels = 4;
        c.heads = 2;
        c.mlp_hidden = 6;
        c
    }

    fn input(n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |(i, j)| ((i * 7 + j * 3) as f64 * 0.37).sin())
    }

    #[test]
    fn smoother_output_shape() {
        let m = Model::new(tiny(Architecture::SelfAttnStack), 1).unwrap();
        let y = m.predict(input(8, 2).view()).unwrap();
        assert_eq!(y.dim(), (8, 3));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forecaster_output_shape() {
        let m = Model::new(tiny(Architecture::EncoderDecoder), 1).unwrap();
        let y = m.predict(input(8, 2).view()).unwrap();
        assert_eq!(y.dim(), (5, 3));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Model::new(tiny(Architecture::EncoderDecoder), 9).unwrap();
        let b = Model::new(tiny(Architecture::EncoderDecoder), 9).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn heads_must_divide_channels() {
        let mut c = tiny(Architecture::SelfAttnStack);
        c.heads = 3;
        assert!(Model::new(c, 0).is_err());
    }

    #[test]
    fn rejects_wrong_layout() {
        let m = Model::new(tiny(Architecture::SelfAttnStack), 0).unwrap();
        let mut names = m.names().to_vec();
        names.swap(0, 1);
        let r = Model::from_parts(m.config().clone(), names, m.params().to_vec(), m.normalizer.clone());
        assert!(matches!(r, Err(Error::Format(_))));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for arch in [Architecture::SelfAttnStack, Architecture::EncoderDecoder] {
            let m = Model::new(tiny(arch), 3).unwrap();
            let x = input(8, 2);
            let n_out = m.config().output_grid.points;
            let y = Array2::from_shape_fn((n_out, 3), |(i, j)| (i as f64 * 0.3 - j as f64).cos());
            let report = gradcheck(
                m.params(),
                |tape, vars| m.loss(tape, vars, x.view(), y.view()),
                1e-6,
                &|_, i| i % 3 == 0,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "{arch:?}: {report:?}");
        }
    }
}
