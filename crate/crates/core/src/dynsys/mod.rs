//! Right-hand sides and integrators for Lorenz '63, Lorenz '96 and
//! Kuramoto–Sivashinsky, plus the flow map and coordinate projections.

mod ks;
mod rk4;
mod systems;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

pub use ks::{wavenumber_index, Etdrk4, CONTOUR_POINTS};
pub use rk4::{aligned_steps, rk4_sample, substeps, Rk4};
pub use systems::{lorenz63_rhs, lorenz96_nonlinear, lorenz96_rhs, SystemKind, SystemSpec, VectorField};

use crate::error::{ensure, Error, Result};

/// Largest internal RK4 step used for the Lorenz systems.
pub const LORENZ_MAX_STEP: f64 = 0.005;

/// Sampled orbit of one system on a uniform time grid.
#[derive(Clone, Debug)]
pub struct TrajectoryBundle {
    pub times: Vec<f64>,
    /// `[times.len() × state_dim]`
    pub states: Array2<f64>,
    pub system: SystemSpec,
    pub seed: Option<u64>,
}

impl TrajectoryBundle {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self) -> Option<f64> {
        (self.times.len() >= 2).then(|| self.times[1] - self.times[0])
    }

    pub fn last_state(&self) -> Vec<f64> {
        self.states.row(self.len() - 1).to_vec()
    }

    /// Observed columns, in `p_indices` order.
    pub fn project_p(&self) -> Array2<f64> {
        self.states.select(Axis(1), &self.system.p_indices)
    }

    /// Unobserved columns, in `q_indices` order.
    pub fn project_q(&self) -> Array2<f64> {
        self.states.select(Axis(1), &self.system.q_indices)
    }
}

/// Uniform time grid `t0, t0 + Δt, …, t1` with `points` samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub points: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, points: usize) -> Result<Self> {
        ensure!(points >= 1, Config, "a time grid needs at least one point");
        ensure!(t1 >= t0 && (points > 1 || t1 == t0), Config, "bad time window [{t0}, {t1}]");
        Ok(TimeGrid { t0, t1, points })
    }

    /// Grid covering `[t0, t1]` with spacing `dt`.
    pub fn from_step(t0: f64, t1: f64, dt: f64) -> Result<Self> {
        let n = aligned_steps(t1 - t0, dt)?;
        Ok(TimeGrid { t0, t1, points: n + 1 })
    }

    pub fn dt(&self) -> f64 {
        if self.points > 1 {
            (self.t1 - self.t0) / (self.points - 1) as f64
        } else {
            0.0
        }
    }

    pub fn times(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..self.points).map(|i| self.t0 + i as f64 * dt).collect()
    }

    /// Affine image of the grid on `[0, 1]`.
    pub fn normalized(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![0.0];
        }
        (0..self.points).map(|i| i as f64 / (self.points - 1) as f64).collect()
    }
}

/// Endpoint of the flow map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub t: f64,
    pub x: Vec<f64>,
}

/// RK4 trajectory of a Lorenz system from `t0` to `t1`, sampled every `dt`.
pub fn integrate_rk4(spec: &SystemSpec, x0: &[f64], t0: f64, t1: f64, dt: f64) -> Result<TrajectoryBundle> {
    spec.validate()?;
    if matches!(spec.system, SystemKind::KuramotoSivashinsky { .. }) {
        return Err(Error::Config("KS is integrated with ETDRK4, not RK4".into()));
    }
    ensure!(x0.iter().all(|v| v.is_finite()), Domain, "non-finite initial state");
    let n = aligned_steps(t1 - t0, dt)?;
    let (times, states) = rk4_sample(&spec.system, x0, t0, dt, n, LORENZ_MAX_STEP.min(dt))?;
    Ok(TrajectoryBundle { times, states, system: spec.clone(), seed: None })
}

/// ETDRK4 trajectory of KS recording every step.
pub fn ks_integrate_etdrk4(u0: &[f64], length: f64, dt: f64, steps: usize) -> Result<TrajectoryBundle> {
    let n = u0.len();
    let spec = SystemSpec::kuramoto_sivashinsky(length, n)?;
    let mut solver = Etdrk4::new(n, length, dt)?;
    let states = solver.sample(u0, 1, steps)?;
    let times = (0..=steps).map(|i| i as f64 * dt).collect();
    Ok(TrajectoryBundle { times, states, system: spec, seed: None })
}

/// The flow map `Φ(t, x0)`; `dt` is the integrator step (ETDRK4) or the
/// output spacing (RK4, sub-stepped internally).
pub fn flow(spec: &SystemSpec, x0: &[f64], t: f64, dt: f64) -> Result<FlowState> {
    match spec.system {
        SystemKind::KuramotoSivashinsky { length, .. } => {
            let steps = aligned_steps(t, dt)?;
            let b = ks_integrate_etdrk4(x0, length, dt, steps)?;
            Ok(FlowState { t, x: b.last_state() })
        }
        _ => {
            let steps = aligned_steps(t, dt)?;
            ensure!(x0.len() == spec.state_dim(), Shape, "state has length {}", x0.len());
            if steps == 0 {
                return Ok(FlowState { t, x: x0.to_vec() });
            }
            let sub = substeps(dt, LORENZ_MAX_STEP);
            let mut rk = Rk4::new(&spec.system);
            let mut x = x0.to_vec();
            rk.advance(&mut x, 0.0, dt / sub as f64, steps * sub)?;
            Ok(FlowState { t, x })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projections_partition_the_state() {
        let spec = SystemSpec::lorenz63(&[0]).unwrap();
        let b = integrate_rk4(&spec, &[1.0, 1.0, 1.0], 0.0, 0.2, 0.02).unwrap();
        let p = b.project_p();
        let q = b.project_q();
        assert_eq!(p.dim(), (11, 1));
        assert_eq!(q.dim(), (11, 2));
        for i in 0..11 {
            assert_eq!(p[[i, 0]], b.states[[i, 0]]);
            assert_eq!(q[[i, 0]], b.states[[i, 1]]);
            assert_eq!(q[[i, 1]], b.states[[i, 2]]);
        }
    }

    #[test]
    fn empty_q_projection() {
        let spec = SystemSpec::lorenz63(&[0, 1, 2]).unwrap();
        let b = integrate_rk4(&spec, &[1.0, 1.0, 1.0], 0.0, 0.1, 0.02).unwrap();
        assert_eq!(b.project_q().dim(), (6, 0));
    }

    #[test]
    fn flow_at_zero_is_identity() {
        let spec = SystemSpec::lorenz96(8.0, 6, &[0, 1]).unwrap();
        let x0 = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(flow(&spec, &x0, 0.0, 0.01).unwrap().x, x0.to_vec());
    }

    #[test]
    fn time_grid_uses_integer_multiples() {
        let spec = SystemSpec::lorenz63(&[0]).unwrap();
        let b = integrate_rk4(&spec, &[1.0, 1.0, 1.0], 0.0, 5.0, 0.02).unwrap();
        assert_eq!(b.len(), 251);
        assert_eq!(b.times[137], 137.0 * 0.02);
    }
}
