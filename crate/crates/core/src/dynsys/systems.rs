use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Which of the three supported dynamical systems, with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemKind {
    Lorenz63 { sigma: f64, rho: f64, beta: f64 },
    Lorenz96 { forcing: f64, dim: usize },
    /// Periodic Kuramoto–Sivashinsky on `[0, length)` sampled at `grid` points.
    KuramotoSivashinsky { length: f64, grid: usize },
}

impl SystemKind {
    pub fn state_dim(&self) -> usize {
        match *self {
            SystemKind::Lorenz63 { .. } => 3,
            SystemKind::Lorenz96 { dim, .. } => dim,
            SystemKind::KuramotoSivashinsky { grid, .. } => grid,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SystemKind::Lorenz63 { .. } => "l63",
            SystemKind::Lorenz96 { .. } => "l96",
            SystemKind::KuramotoSivashinsky { .. } => "ks",
        }
    }
}

/// A dynamical system together with its observed/unobserved coordinate split.
///
/// Indices are zero-based positions in the full state vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub system: SystemKind,
    pub p_indices: Vec<usize>,
    pub q_indices: Vec<usize>,
}

impl SystemSpec {
    pub fn new(system: SystemKind, p_indices: Vec<usize>, q_indices: Vec<usize>) -> Result<Self> {
        let spec = SystemSpec { system, p_indices, q_indices };
        spec.validate()?;
        Ok(spec)
    }

    /// Classical Lorenz '63 parameters (σ = 10, ρ = 28, β = 8/3).
    pub fn lorenz63(observed: &[usize]) -> Result<Self> {
        let kind = SystemKind::Lorenz63 { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 };
        Self::with_observed(kind, observed)
    }

    pub fn lorenz96(forcing: f64, dim: usize, observed: &[usize]) -> Result<Self> {
        Self::with_observed(SystemKind::Lorenz96 { forcing, dim }, observed)
    }

    /// KS on `L = 32π` with the whole grid treated as observed.
    pub fn kuramoto_sivashinsky(length: f64, grid: usize) -> Result<Self> {
        let kind = SystemKind::KuramotoSivashinsky { length, grid };
        Self::with_observed(kind, &(0..grid).collect::<Vec<_>>())
    }

    /// Builds a spec whose unobserved set is the complement of `observed`.
    pub fn with_observed(system: SystemKind, observed: &[usize]) -> Result<Self> {
        let d = system.state_dim();
        let q = (0..d).filter(|i| !observed.contains(i)).collect();
        Self::new(system, observed.to_vec(), q)
    }

    pub fn state_dim(&self) -> usize {
        self.system.state_dim()
    }

    pub fn validate(&self) -> Result<()> {
        match self.system {
            SystemKind::Lorenz63 { sigma, rho, beta } => {
                ensure!(
                    [sigma, rho, beta].iter().all(|v| v.is_finite()),
                    Config,
                    "non-finite Lorenz '63 parameters"
                );
            }
            SystemKind::Lorenz96 { forcing, dim } => {
                ensure!(dim >= 4, Config, "Lorenz '96 needs d >= 4, got {dim}");
                ensure!(forcing.is_finite(), Config, "non-finite Lorenz '96 forcing");
            }
            SystemKind::KuramotoSivashinsky { length, grid } => {
                ensure!(
                    grid.is_power_of_two() && grid >= 4,
                    Config,
                    "KS grid size must be a power of two, got {grid}"
                );
                ensure!(length > 0.0 && length.is_finite(), Config, "KS domain length must be positive");
            }
        }
        let d = self.state_dim();
        let mut seen = vec![false; d];
        for &i in self.p_indices.iter().chain(&self.q_indices) {
            ensure!(i < d, Config, "index {i} out of range for state dimension {d}");
            ensure!(!seen[i], Config, "index {i} appears twice in the p/q split");
            seen[i] = true;
        }
        ensure!(seen.iter().all(|&s| s), Config, "p and q indices do not cover the state");
        Ok(())
    }
}

/// Autonomous vector field `ẋ = F(x)` on `ℝ^dim`.
pub trait VectorField {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
}

impl<F: Fn(&[f64], &mut [f64])> VectorField for (usize, F) {
    fn dim(&self) -> usize {
        self.0
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.1)(x, out)
    }
}

pub fn lorenz63_rhs(state: &[f64; 3], sigma: f64, rho: f64, beta: f64) -> Result<[f64; 3]> {
    if !state.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("non-finite Lorenz '63 state".into()));
    }
    let mut out = [0.0; 3];
    l63_into(state, sigma, rho, beta, &mut out);
    Ok(out)
}

#[inline]
fn l63_into(x: &[f64], sigma: f64, rho: f64, beta: f64, out: &mut [f64]) {
    out[0] = sigma * (x[1] - x[0]);
    out[1] = x[0] * (rho - x[2]) - x[1];
    out[2] = x[0] * x[1] - beta * x[2];
}

pub fn lorenz96_rhs(state: &[f64], forcing: f64) -> Result<Vec<f64>> {
    ensure!(state.len() >= 4, Config, "Lorenz '96 needs d >= 4, got {}", state.len());
    let mut out = vec![0.0; state.len()];
    l96_into(state, forcing, &mut out);
    Ok(out)
}

/// Quadratic advection term `B_i(u) = (u_{i+1} - u_{i-2}) u_{i-1}` with periodic indices.
pub fn lorenz96_nonlinear(state: &[f64]) -> Vec<f64> {
    let d = state.len();
    (0..d)
        .map(|i| (state[(i + 1) % d] - state[(i + d - 2) % d]) * state[(i + d - 1) % d])
        .collect()
}

#[inline]
fn l96_into(u: &[f64], forcing: f64, out: &mut [f64]) {
    let d = u.len();
    for i in 0..d {
        let ip1 = u[(i + 1) % d];
        let im1 = u[(i + d - 1) % d];
        let im2 = u[(i + d - 2) % d];
        out[i] = (ip1 - im2) * im1 - u[i] + forcing;
    }
}

impl VectorField for SystemKind {
    fn dim(&self) -> usize {
        self.state_dim()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            SystemKind::Lorenz63 { sigma, rho, beta } => l63_into(x, sigma, rho, beta, out),
            SystemKind::Lorenz96 { forcing, .. } => l96_into(x, forcing, out),
            SystemKind::KuramotoSivashinsky { .. } => {
                panic!("KS is integrated spectrally, not through a pointwise vector field")
            }
        }
    }
}
