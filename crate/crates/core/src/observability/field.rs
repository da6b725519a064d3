use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{Jet, VectorFieldPair};
use crate::dynsys::{wavenumber_index, SystemKind, SystemSpec};
use crate::error::Result;

/// A supported system's vector field, reordered so observed coordinates come first.
pub struct SystemField {
    kind: SystemKind,
    /// `order[k]` is the full-state index of the `k`-th `(p, q)` coordinate.
    order: Vec<usize>,
    dim_p: usize,
    ks: Option<KsField>,
}

impl SystemField {
    pub fn new(spec: &SystemSpec) -> Result<Self> {
        spec.validate()?;
        let order: Vec<usize> = spec.p_indices.iter().chain(&spec.q_indices).copied().collect();
        let ks = match spec.system {
            SystemKind::KuramotoSivashinsky { length, grid } => Some(KsField::new(length, grid)),
            _ => None,
        };
        Ok(SystemField { kind: spec.system.clone(), order, dim_p: spec.p_indices.len(), ks })
    }

    /// Reorders a full state into `(p, q)` ordering.
    pub fn to_pq(&self, state: &[f64]) -> Vec<f64> {
        self.order.iter().map(|&i| state[i]).collect()
    }

    fn full_rhs(&self, u: &[Jet]) -> Vec<Jet> {
        match self.kind {
            SystemKind::Lorenz63 { sigma, rho, beta } => {
                let (x, y, z) = (&u[0], &u[1], &u[2]);
                vec![
                    (y - x).scale(sigma),
                    x * &z.scale(-1.0).add_scalar(rho) - y,
                    x * y - z.scale(beta),
                ]
            }
            SystemKind::Lorenz96 { forcing, dim } => (0..dim)
                .map(|i| {
                    let adv = &(&u[(i + 1) % dim] - &u[(i + dim - 2) % dim]) * &u[(i + dim - 1) % dim];
                    (adv - &u[i]).add_scalar(forcing)
                })
                .collect(),
            SystemKind::KuramotoSivashinsky { .. } => self.ks.as_ref().expect("KS field").rhs(u),
        }
    }
}

impl VectorFieldPair for SystemField {
    fn dim_p(&self) -> usize {
        self.dim_p
    }

    fn dim_q(&self) -> usize {
        self.order.len() - self.dim_p
    }

    fn eval(&self, x: &[Jet]) -> Vec<Jet> {
        let mut u = vec![Jet::constant(0.0); x.len()];
        for (k, &i) in self.order.iter().enumerate() {
            u[i] = x[k].clone();
        }
        let full = self.full_rhs(&u);
        self.order.iter().map(|&i| full[i].clone()).collect()
    }
}

/// Pseudospectral KS right-hand side written with dense differentiation
/// matrices so it can be evaluated on jets. Cost grows like `N²` per
/// evaluation; intended for spot checks only.
pub struct KsField {
    d1: Vec<Vec<f64>>,
    d2: Vec<Vec<f64>>,
    d4: Vec<Vec<f64>>,
}

impl KsField {
    pub fn new(length: f64, n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let diff = |power: i32| -> Vec<Vec<f64>> {
            // Column j is the derivative of the j-th unit vector.
            let mut cols = vec![vec![0.0; n]; n];
            for (j, col) in cols.iter_mut().enumerate() {
                let mut v = vec![Complex64::default(); n];
                v[j] = Complex64::new(1.0, 0.0);
                fwd.process(&mut v);
                for (m, z) in v.iter_mut().enumerate() {
                    let idx = wavenumber_index(m, n);
                    let k = if power % 2 == 1 && 2 * idx.unsigned_abs() as usize == n {
                        0.0
                    } else {
                        2.0 * PI * idx as f64 / length
                    };
                    *z *= Complex64::new(0.0, k).powi(power);
                }
                inv.process(&mut v);
                for (i, z) in v.iter().enumerate() {
                    col[i] = z.re / n as f64;
                }
            }
            (0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect()
        };
        KsField { d1: diff(1), d2: diff(2), d4: diff(4) }
    }

    fn apply(m: &[Vec<f64>], u: &[Jet]) -> Vec<Jet> {
        m.iter()
            .map(|row| {
                let mut acc = Jet::constant(0.0);
                for (a, x) in row.iter().zip(u) {
                    if *a != 0.0 {
                        acc = &acc + &x.scale(*a);
                    }
                }
                acc
            })
            .collect()
    }

    pub fn rhs(&self, u: &[Jet]) -> Vec<Jet> {
        let ux = Self::apply(&self.d1, u);
        let uxx = Self::apply(&self.d2, u);
        let uxxxx = Self::apply(&self.d4, u);
        (0..u.len())
            .map(|i| -(&(&u[i] * &ux[i]) + &(&uxx[i] + &uxxxx[i])))
            .collect()
    }
}
