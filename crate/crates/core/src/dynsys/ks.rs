//! Kuramoto–Sivashinsky `u_t + u_xxxx + u_xx + u u_x = 0` on a periodic domain,
//! integrated pseudospectrally with ETDRK4.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{ensure, Error, Result};

/// Number of contour points used for the φ-function means.
pub const CONTOUR_POINTS: usize = 32;

/// Signed wavenumber index of FFT bin `j` on an `n`-point grid.
pub fn wavenumber_index(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

pub struct Etdrk4 {
    n: usize,
    length: f64,
    dt: f64,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    e: Vec<f64>,
    e2: Vec<f64>,
    q: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    f3: Vec<f64>,
    /// `-i k / 2`, zeroed outside the 2/3 band.
    g: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl Etdrk4 {
    pub fn new(n: usize, length: f64, dt: f64) -> Result<Self> {
        ensure!(n.is_power_of_two() && n >= 4, Config, "KS grid size must be a power of two, got {n}");
        ensure!(dt > 0.0 && dt.is_finite(), Config, "KS time step must be positive");
        ensure!(length > 0.0 && length.is_finite(), Config, "KS domain length must be positive");
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let cutoff = n as f64 / 3.0;
        let mut s = Etdrk4 {
            n,
            length,
            dt,
            fwd,
            inv,
            e: vec![0.0; n],
            e2: vec![0.0; n],
            q: vec![0.0; n],
            f1: vec![0.0; n],
            f2: vec![0.0; n],
            f3: vec![0.0; n],
            g: vec![Complex64::new(0.0, 0.0); n],
            scratch: vec![Complex64::new(0.0, 0.0); n],
        };
        let roots: Vec<Complex64> = (1..=CONTOUR_POINTS)
            .map(|m| Complex64::from_polar(1.0, PI * (m as f64 - 0.5) / CONTOUR_POINTS as f64))
            .collect();
        for j in 0..n {
            let idx = wavenumber_index(j, n);
            let k = 2.0 * PI * idx as f64 / length;
            let lin = k * k - k.powi(4);
            s.e[j] = (dt * lin).exp();
            s.e2[j] = (dt * lin / 2.0).exp();
            let (mut q, mut f1, mut f2, mut f3) = (Complex64::default(), Complex64::default(), Complex64::default(), Complex64::default());
            for r in &roots {
                let z = dt * lin + r;
                let ez = z.exp();
                let z3 = z * z * z;
                q += ((z / 2.0).exp() - 1.0) / z;
                f1 += (-4.0 - z + ez * (4.0 - 3.0 * z + z * z)) / z3;
                f2 += (2.0 + z + ez * (z - 2.0)) / z3;
                f3 += (-4.0 - 3.0 * z - z * z + ez * (4.0 - z)) / z3;
            }
            let m = CONTOUR_POINTS as f64;
            s.q[j] = dt * (q / m).re;
            s.f1[j] = dt * (f1 / m).re;
            s.f2[j] = dt * (f2 / m).re;
            s.f3[j] = dt * (f3 / m).re;
            let keep = (idx.abs() as f64) < cutoff && 2 * idx.unsigned_abs() as usize != n;
            s.g[j] = if keep { Complex64::new(0.0, -0.5 * k) } else { Complex64::default() };
        }
        Ok(s)
    }

    pub fn grid_size(&self) -> usize {
        self.n
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn to_spectral(&self, u: &[f64]) -> Vec<Complex64> {
        let mut v: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.fwd.process(&mut v);
        v
    }

    /// Inverse transform, returning the full complex physical field.
    pub fn to_physical_complex(&self, v: &[Complex64]) -> Vec<Complex64> {
        let mut u = v.to_vec();
        self.inv.process(&mut u);
        let scale = 1.0 / self.n as f64;
        u.iter_mut().for_each(|z| *z *= scale);
        u
    }

    pub fn to_physical(&self, v: &[Complex64]) -> Vec<f64> {
        self.to_physical_complex(v).into_iter().map(|z| z.re).collect()
    }

    fn nonlinear(&mut self, v: &[Complex64], out: &mut [Complex64]) {
        let scale = 1.0 / self.n as f64;
        self.scratch.copy_from_slice(v);
        self.inv.process(&mut self.scratch);
        for z in self.scratch.iter_mut() {
            let u = z.re * scale;
            *z = Complex64::new(u * u, 0.0);
        }
        self.fwd.process(&mut self.scratch);
        for ((o, g), w) in out.iter_mut().zip(&self.g).zip(&self.scratch) {
            *o = g * w;
        }
    }

    /// One ETDRK4 step of the spectral state.
    pub fn step(&mut self, v: &mut [Complex64]) {
        let n = self.n;
        let zero = Complex64::default();
        let (mut nv, mut na, mut nb, mut nc) = (vec![zero; n], vec![zero; n], vec![zero; n], vec![zero; n]);
        let mut a = vec![zero; n];
        let mut b = vec![zero; n];
        let mut c = vec![zero; n];
        self.nonlinear(v, &mut nv);
        for j in 0..n {
            a[j] = self.e2[j] * v[j] + self.q[j] * nv[j];
        }
        self.nonlinear(&a, &mut na);
        for j in 0..n {
            b[j] = self.e2[j] * v[j] + self.q[j] * na[j];
        }
        self.nonlinear(&b, &mut nb);
        for j in 0..n {
            c[j] = self.e2[j] * a[j] + self.q[j] * (2.0 * nb[j] - nv[j]);
        }
        self.nonlinear(&c, &mut nc);
        for j in 0..n {
            v[j] = self.e[j] * v[j]
                + self.f1[j] * nv[j]
                + 2.0 * self.f2[j] * (na[j] + nb[j])
                + self.f3[j] * nc[j];
        }
    }

    /// Advances `steps` steps, failing on a non-finite spectral state.
    pub fn advance(&mut self, v: &mut [Complex64], t0: f64, steps: usize) -> Result<()> {
        for s in 0..steps {
            self.step(v);
            if !v.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
                return Err(Error::Integration {
                    time: t0 + (s + 1) as f64 * self.dt,
                    reason: "non-finite KS spectral state".into(),
                });
            }
        }
        Ok(())
    }

    /// Integrates from `u0`, recording every `substeps`-th state, `n_out + 1` rows in total.
    pub fn sample(&mut self, u0: &[f64], substeps: usize, n_out: usize) -> Result<Array2<f64>> {
        ensure!(u0.len() == self.n, Shape, "KS initial field has length {}, expected {}", u0.len(), self.n);
        ensure!(u0.iter().all(|x| x.is_finite()), Domain, "non-finite KS initial field");
        let mut v = self.to_spectral(u0);
        let mut out = Array2::zeros((n_out + 1, self.n));
        for (dst, src) in out.row_mut(0).iter_mut().zip(u0) {
            *dst = *src;
        }
        for i in 1..=n_out {
            self.advance(&mut v, (i - 1) as f64 * substeps as f64 * self.dt, substeps)?;
            for (dst, src) in out.row_mut(i).iter_mut().zip(self.to_physical(&v)) {
                *dst = src;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, l: f64) -> Vec<f64> {
        (0..n).map(|j| l * j as f64 / n as f64).collect()
    }

    #[test]
    fn zero_field_stays_zero() {
        let mut s = Etdrk4::new(64, 32.0 * PI, 0.25).unwrap();
        let out = s.sample(&vec![0.0; 64], 1, 10).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(matches!(Etdrk4::new(100, 1.0, 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn linear_mode_growth() {
        let l = 32.0 * PI;
        let n = 128;
        let eps = 1e-6;
        let u0: Vec<f64> = grid(n, l).iter().map(|x| eps * (2.0 * PI * x / l).sin()).collect();
        let dt = 0.1;
        let steps = 50;
        let mut s = Etdrk4::new(n, l, dt).unwrap();
        let out = s.sample(&u0, steps, 1).unwrap();
        let k = 2.0 * PI / l;
        let growth = ((k * k - k.powi(4)) * dt * steps as f64).exp();
        // Amplitude of mode 1 from the discrete projection onto sin.
        let amp = |row: ndarray::ArrayView1<f64>| {
            2.0 / n as f64
                * row.iter().zip(grid(n, l)).map(|(u, x)| u * (2.0 * PI * x / l).sin()).sum::<f64>()
        };
        let ratio = amp(out.row(1)) / amp(out.row(0));
        assert!((ratio / growth - 1.0).abs() < 0.01, "ratio {ratio} vs {growth}");
    }

    #[test]
    fn mean_is_preserved() {
        let l = 32.0 * PI;
        let n = 64;
        let u0: Vec<f64> = grid(n, l).iter().map(|x| 0.3 + (x / 16.0).cos() * (1.0 + (x / 16.0).sin())).collect();
        let mut s = Etdrk4::new(n, l, 0.25).unwrap();
        let out = s.sample(&u0, 4, 10).unwrap();
        let m0: f64 = out.row(0).sum() / n as f64;
        let m1: f64 = out.row(10).sum() / n as f64;
        assert!((m0 - m1).abs() < 1e-12, "{m0} {m1}");
    }
}
