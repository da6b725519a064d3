use ndarray::Array2;

use super::systems::VectorField;
use crate::error::{Error, Result};

/// Classical fourth-order Runge–Kutta with a fixed internal step.
pub struct Rk4<'a, F: ?Sized> {
    field: &'a F,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl<'a, F: VectorField + ?Sized> Rk4<'a, F> {
    pub fn new(field: &'a F) -> Self {
        let d = field.dim();
        Rk4 {
            field,
            k: [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]],
            tmp: vec![0.0; d],
        }
    }

    pub fn step(&mut self, x: &mut [f64], h: f64) {
        let [k1, k2, k3, k4] = &mut self.k;
        let tmp = &mut self.tmp;
        self.field.eval(x, k1);
        for i in 0..x.len() {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        self.field.eval(tmp, k2);
        for i in 0..x.len() {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        self.field.eval(tmp, k3);
        for i in 0..x.len() {
            tmp[i] = x[i] + h * k3[i];
        }
        self.field.eval(tmp, k4);
        for i in 0..x.len() {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }

    /// Advances `x` by `n` steps of size `h`; errors on the first non-finite state.
    pub fn advance(&mut self, x: &mut [f64], t0: f64, h: f64, n: usize) -> Result<()> {
        for s in 0..n {
            self.step(x, h);
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::Integration {
                    time: t0 + (s + 1) as f64 * h,
                    reason: "non-finite state".into(),
                });
            }
        }
        Ok(())
    }
}

/// Number of internal sub-steps so that each one is at most `max_step`.
pub fn substeps(dt_out: f64, max_step: f64) -> usize {
    ((dt_out / max_step) - 1e-9).ceil().max(1.0) as usize
}

/// Integer step count for `span / dt`, rejecting spans that are not on the grid.
pub fn aligned_steps(span: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    if span < 0.0 {
        return Err(Error::Config(format!("negative integration span {span}")));
    }
    let r = span / dt;
    let n = r.round();
    if (r - n).abs() > 1e-9 * n.max(1.0) {
        return Err(Error::Config(format!(
            "span {span} is not an integer multiple of dt = {dt}"
        )));
    }
    Ok(n as usize)
}

/// Integrates from `x0` and records `n_out + 1` samples at `t0 + i * dt_out`.
pub fn rk4_sample<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    t0: f64,
    dt_out: f64,
    n_out: usize,
    max_step: f64,
) -> Result<(Vec<f64>, Array2<f64>)> {
    let d = field.dim();
    if x0.len() != d {
        return Err(Error::Shape(format!("initial state has length {}, expected {d}", x0.len())));
    }
    let sub = substeps(dt_out, max_step);
    let h = dt_out / sub as f64;
    let mut rk = Rk4::new(field);
    let mut x = x0.to_vec();
    let mut states = Array2::zeros((n_out + 1, d));
    states.row_mut(0).assign(&ndarray::ArrayView1::from(&x[..]));
    let times = (0..=n_out).map(|i| t0 + i as f64 * dt_out).collect();
    for i in 1..=n_out {
        rk.advance(&mut x, t0 + (i - 1) as f64 * dt_out, h, sub)?;
        states.row_mut(i).assign(&ndarray::ArrayView1::from(&x[..]));
    }
    Ok((times, states))
}
