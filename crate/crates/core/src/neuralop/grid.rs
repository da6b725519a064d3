use ndarray::{Array2, ArrayView2};

use crate::dynsys::TimeGrid;
use crate::error::{ensure, Result};

/// Composite trapezoid weights on a strictly increasing grid. A single point
/// gets weight one so that quadrature-weighted softmax stays well defined.
pub fn trapezoid_weights(grid: &[f64]) -> Result<Vec<f64>> {
    ensure!(!grid.is_empty(), Shape, "empty grid");
    ensure!(grid.iter().all(|t| t.is_finite()), Domain, "non-finite grid point");
    ensure!(grid.windows(2).all(|w| w[1] > w[0]), Domain, "grid points must be strictly increasing");
    let n = grid.len();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let mut w = vec![0.0; n];
    for i in 0..n - 1 {
        let h = 0.5 * (grid[i + 1] - grid[i]);
        w[i] += h;
        w[i + 1] += h;
    }
    Ok(w)
}

/// Maps physical times into the coordinate where `reference` spans `[0, 1]`.
/// Forecast queries therefore land to the right of 1.
pub fn normalize_times(times: &[f64], reference: &TimeGrid) -> Vec<f64> {
    let span = reference.t1 - reference.t0;
    if span <= 0.0 {
        return times.iter().map(|t| t - reference.t0).collect();
    }
    times.iter().map(|t| (t - reference.t0) / span).collect()
}

/// A vector-valued function sampled on a one-dimensional grid, with the
/// quadrature weights used to integrate it.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub grid: Vec<f64>,
    pub weights: Vec<f64>,
    /// `[grid.len() × channels]`
    pub values: Array2<f64>,
}

impl GridFunction {
    pub fn new(grid: Vec<f64>, values: Array2<f64>) -> Result<Self> {
        ensure!(
            values.nrows() == grid.len(),
            Shape,
            "{} grid points but {} value rows",
            grid.len(),
            values.nrows()
        );
        let weights = trapezoid_weights(&grid)?;
        Ok(GridFunction { grid, weights, values })
    }

    /// Samples on `N` equispaced points of `[0, 1]`.
    pub fn uniform(values: Array2<f64>) -> Result<Self> {
        let n = values.nrows();
        ensure!(n > 0, Shape, "no samples");
        let grid = if n == 1 { vec![0.0] } else { (0..n).map(|i| i as f64 / (n - 1) as f64).collect() };
        Self::new(grid, values)
    }

    pub fn on_time_grid(values: ArrayView2<f64>, times: &TimeGrid, reference: &TimeGrid) -> Result<Self> {
        Self::new(normalize_times(&times.times(), reference), values.to_owned())
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    /// `∫ f` per channel.
    pub fn integrate(&self) -> Vec<f64> {
        (0..self.channels())
            .map(|c| self.values.column(c).iter().zip(&self.weights).map(|(v, w)| v * w).sum())
            .collect()
    }

    /// Quadrature approximation of `‖f‖_{L²}`.
    pub fn l2_norm(&self) -> f64 {
        let mut s = 0.0;
        for (row, w) in self.values.rows().into_iter().zip(&self.weights) {
            s += w * row.iter().map(|v| v * v).sum::<f64>();
        }
        s.sqrt()
    }
}
