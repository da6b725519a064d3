use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::dynsys::{rk4_sample, substeps, wavenumber_index, Etdrk4, Rk4, SystemKind, SystemSpec, LORENZ_MAX_STEP};
use crate::error::{ensure, Result};

/// Largest ETDRK4 step used when simulating KS.
pub const KS_MAX_STEP: f64 = 0.05;

/// Tag of the stream range used by [`sample_nu0`]; splits use 0 and 1.
const NU0_TAG: u64 = 2;

/// Generator for one sample: the master seed picks the key and `stream`
/// picks an independent ChaCha stream, so any sample can be recreated alone.
pub fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for sample `index` of a split on retry `attempt`.
pub fn stream_id(tag: u64, index: u64, attempt: u32) -> u64 {
    debug_assert!(index < 1 << 46 && attempt < 1 << 16);
    tag << 62 | index << 16 | attempt as u64
}

/// One draw from the initial law ν₀ of `system`.
pub fn draw_nu0<R: Rng>(system: &SystemKind, rng: &mut R) -> Vec<f64> {
    match *system {
        SystemKind::Lorenz63 { .. } => {
            vec![rng.gen_range(-15.0..15.0), rng.gen_range(-15.0..15.0), rng.gen_range(0.0..40.0)]
        }
        SystemKind::Lorenz96 { forcing, dim } => (0..dim).map(|_| forcing + rng.gen_range(-1.0..1.0)).collect(),
        SystemKind::KuramotoSivashinsky { grid, .. } => {
            // Random combination of the first eight Fourier modes, scaled to
            // unit root-mean-square.
            let coef: Vec<(f64, f64)> =
                (0..8).map(|_| (rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))).collect();
            let mut u: Vec<f64> = (0..grid)
                .map(|j| {
                    let x = std::f64::consts::TAU * j as f64 / grid as f64;
                    coef.iter()
                        .enumerate()
                        .map(|(m, (a, b))| {
                            let k = (m + 1) as f64;
                            a * (k * x).cos() + b * (k * x).sin()
                        })
                        .sum()
                })
                .collect();
            let rms = (u.iter().map(|v| v * v).sum::<f64>() / grid as f64).sqrt();
            u.iter_mut().for_each(|v| *v /= rms);
            u
        }
    }
}

/// `count` i.i.d. draws from ν₀, reproducible from `seed`.
pub fn sample_nu0(system: &SystemSpec, seed: u64, count: usize) -> Result<Vec<Vec<f64>>> {
    ensure!(count >= 1, Usage, "count must be at least 1");
    system.validate()?;
    Ok((0..count)
        .map(|j| draw_nu0(&system.system, &mut sample_rng(seed, stream_id(NU0_TAG, j as u64, 0))))
        .collect())
}

/// Advances one state by `duration` with the system's integrator.
pub fn advance(system: &SystemKind, x: &[f64], duration: f64) -> Result<Vec<f64>> {
    ensure!(duration >= 0.0, Config, "negative duration {duration}");
    if duration == 0.0 {
        return Ok(x.to_vec());
    }
    match *system {
        SystemKind::KuramotoSivashinsky { length, grid } => {
            ensure!(x.len() == grid, Shape, "KS state has length {}, expected {grid}", x.len());
            let n = substeps(duration, KS_MAX_STEP);
            let mut solver = Etdrk4::new(grid, length, duration / n as f64)?;
            let mut v = solver.to_spectral(x);
            solver.advance(&mut v, 0.0, n)?;
            Ok(solver.to_physical(&v))
        }
        _ => {
            ensure!(x.len() == system.state_dim(), Shape, "state has length {}", x.len());
            let n = substeps(duration, LORENZ_MAX_STEP);
            let mut out = x.to_vec();
            Rk4::new(system).advance(&mut out, 0.0, duration / n as f64, n)?;
            Ok(out)
        }
    }
}

/// Pushes each point forward by `duration`; failures are reported per point.
pub fn burn_in(system: &SystemSpec, points: &[Vec<f64>], duration: f64) -> Vec<Result<Vec<f64>>> {
    points.par_iter().map(|x| advance(&system.system, x, duration)).collect()
}

/// `steps + 1` states at `0, dt, …, steps·dt` starting from `x0`.
pub fn simulate(system: &SystemKind, x0: &[f64], dt: f64, steps: usize) -> Result<Array2<f64>> {
    match *system {
        SystemKind::KuramotoSivashinsky { length, grid } => {
            let sub = substeps(dt, KS_MAX_STEP);
            let mut solver = Etdrk4::new(grid, length, dt / sub as f64)?;
            solver.sample(x0, sub, steps)
        }
        _ => Ok(rk4_sample(system, x0, 0.0, dt, steps, LORENZ_MAX_STEP.min(dt))?.1),
    }
}

/// Fourier low-pass on a periodic grid, with cached FFT plans.
pub struct SpectralFilter {
    n: usize,
    k_keep: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl SpectralFilter {
    pub fn new(n: usize, k_keep: usize) -> Result<Self> {
        ensure!(n.is_power_of_two() && n >= 2, Config, "filter grid must be a power of two, got {n}");
        ensure!(k_keep >= 1 && k_keep <= n / 2, Config, "k_keep must lie in [1, {}], got {k_keep}", n / 2);
        let mut planner = FftPlanner::new();
        Ok(SpectralFilter { n, k_keep, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n) })
    }

    /// Keeps wavenumbers with `|k| < k_keep`; at `k_keep = n/2` the Nyquist
    /// mode is kept too, so the filter is the identity.
    fn keeps(&self, j: usize) -> bool {
        self.k_keep == self.n / 2 || wavenumber_index(j, self.n).unsigned_abs() < self.k_keep as u64
    }

    pub fn apply(&self, field: &[f64]) -> Result<Vec<f64>> {
        ensure!(field.len() == self.n, Shape, "field has length {}, filter expects {}", field.len(), self.n);
        if self.k_keep == self.n / 2 {
            return Ok(field.to_vec());
        }
        let mut v: Vec<Complex64> = field.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.fwd.process(&mut v);
        for (j, z) in v.iter_mut().enumerate() {
            if !self.keeps(j) {
                *z = Complex64::default();
            }
        }
        self.inv.process(&mut v);
        let s = 1.0 / self.n as f64;
        Ok(v.iter().map(|z| z.re * s).collect())
    }
}

pub fn spectral_filter(field: &[f64], k_keep: usize) -> Result<Vec<f64>> {
    SpectralFilter::new(field.len(), k_keep)?.apply(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    #[test]
    fn l63_draws_in_box() {
        let s = SystemSpec::lorenz63(&[0]).unwrap();
        for x in sample_nu0(&s, 5, 500).unwrap() {
            assert!(x[0].abs() <= 15.0 && x[1].abs() <= 15.0 && (0.0..=40.0).contains(&x[2]));
        }
    }

    #[test]
    fn l96_draws_near_forcing() {
        let s = SystemSpec::lorenz96(8.0, 40, &[0]).unwrap();
        for x in sample_nu0(&s, 1, 50).unwrap() {
            assert_eq!(x.len(), 40);
            assert!(x.iter().all(|v| (7.0..=9.0).contains(v)));
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let s = SystemSpec::kuramoto_sivashinsky(32.0 * std::f64::consts::PI, 64).unwrap();
        assert_eq!(sample_nu0(&s, 3, 4).unwrap(), sample_nu0(&s, 3, 4).unwrap());
        assert_ne!(sample_nu0(&s, 3, 4).unwrap(), sample_nu0(&s, 4, 4).unwrap());
    }

    #[test]
    fn zero_burn_in_is_identity() {
        let s = SystemSpec::lorenz63(&[0]).unwrap();
        let pts = vec![vec![1.0, 2.0, 3.0]];
        assert_eq!(burn_in(&s, &pts, 0.0)[0].as_ref().unwrap(), &pts[0]);
    }

    #[test]
    fn l63_burn_in_reaches_attractor() {
        let s = SystemSpec::lorenz63(&[0]).unwrap();
        let pts = sample_nu0(&s, 11, 40).unwrap();
        for x in burn_in(&s, &pts, 20.0) {
            let x = x.unwrap();
            assert!(x[0].abs() <= 25.0 && x[1].abs() <= 35.0 && (0.0..=55.0).contains(&x[2]), "{x:?}");
        }
    }

    #[test]
    fn filter_identity_and_idempotence() {
        let u: Vec<f64> = (0..64).map(|j| ((j * j) as f64 * 0.37).sin()).collect();
        let id = spectral_filter(&u, 32).unwrap();
        assert!(u.iter().zip(&id).all(|(a, b)| (a - b).abs() < 1e-12));
        let once = spectral_filter(&u, 9).unwrap();
        let twice = spectral_filter(&once, 9).unwrap();
        assert!(once.iter().zip(&twice).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn high_mode_removed() {
        let n = 256;
        let u: Vec<f64> = (0..n).map(|j| (TAU * 70.0 * j as f64 / n as f64).sin()).collect();
        let f = spectral_filter(&u, 64).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn filter_range_checked() {
        assert!(spectral_filter(&[0.0; 16], 0).is_err());
        assert!(spectral_filter(&[0.0; 16], 9).is_err());
        assert!(spectral_filter(&[0.0; 12], 2).is_err());
    }
}
