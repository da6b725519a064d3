//! Lie-derivative stacks of the observed vector field and the
//! observability-rank test built on them.
//!
//! States are ordered `(p, q)`: the `d_p` observed coordinates first, then the
//! `d_q` unobserved ones. Derivatives are computed with nested dual numbers
//! ([`Jet`]), which is exact up to rounding for the polynomial right-hand
//! sides of the supported systems.

mod jet;
mod field;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use field::{KsField, SystemField};
pub use jet::Jet;

use crate::error::{ensure, Result};
#[cfg(test)]
use crate::error::Error;

/// Default relative singular-value threshold for the numerical rank.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-8;

/// Vector field `(f, g)` on `ℝ^{d_p + d_q}` in `(p, q)` ordering, evaluable on jets.
pub trait VectorFieldPair {
    fn dim_p(&self) -> usize;
    fn dim_q(&self) -> usize;
    /// Full field `(f(x), g(x))`, length `d_p + d_q`.
    fn eval(&self, x: &[Jet]) -> Vec<Jet>;

    fn dim(&self) -> usize {
        self.dim_p() + self.dim_q()
    }
}

fn to_jets(point: &[f64]) -> Vec<Jet> {
    point.iter().map(|&v| Jet::constant(v)).collect()
}

fn check_point(field: &dyn VectorFieldPair, point: &[f64]) -> Result<()> {
    ensure!(
        point.len() == field.dim(),
        Domain,
        "point has dimension {}, field expects {}",
        point.len(),
        field.dim()
    );
    ensure!(point.iter().all(|v| v.is_finite()), Domain, "non-finite point");
    Ok(())
}

/// `ℒ h (x) = Dh(x) · (f(x), g(x))`.
pub fn lie_derivative(
    field: &dyn VectorFieldPair,
    h: &dyn Fn(&[Jet]) -> Vec<Jet>,
    point: &[f64],
) -> Result<Vec<f64>> {
    check_point(field, point)?;
    let x = to_jets(point);
    let fx = field.eval(&x);
    ensure!(fx.len() == field.dim(), Domain, "field returned {} components", fx.len());
    let xe: Vec<Jet> = x.iter().zip(&fx).map(|(a, t)| a.extend(t)).collect();
    Ok(h(&xe).iter().map(|r| r.top_derivative().value()).collect())
}

/// `ℒ^m f` evaluated on jets, so that derivatives already seeded in `x` propagate.
pub fn iterated_lie(field: &dyn VectorFieldPair, m: usize, x: &[Jet]) -> Vec<Jet> {
    if m == 0 {
        let mut fx = field.eval(x);
        fx.truncate(field.dim_p());
        return fx;
    }
    let fx = field.eval(x);
    let xe: Vec<Jet> = x.iter().zip(&fx).map(|(a, t)| a.extend(t)).collect();
    iterated_lie(field, m - 1, &xe).iter().map(Jet::top_derivative).collect()
}

fn stack_jets(field: &dyn VectorFieldPair, x: &[Jet], n: usize, include_p: bool) -> Vec<Jet> {
    let mut out = Vec::with_capacity((n + 1) * field.dim_p());
    if include_p {
        out.extend_from_slice(&x[..field.dim_p()]);
    }
    for m in 0..n {
        out.extend(iterated_lie(field, m, x));
    }
    out
}

/// Lie-derivative stack `F^(n)` (with `p`) or `F̃^(n)` (without).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LieStack {
    pub order: usize,
    pub includes_p: bool,
    pub values: Vec<f64>,
    pub base_point: Vec<f64>,
}

pub fn build_f(field: &dyn VectorFieldPair, point: &[f64], n: usize, include_p: bool) -> Result<LieStack> {
    ensure!(n >= 1, Config, "Lie stack order must be at least 1");
    check_point(field, point)?;
    let values = stack_jets(field, &to_jets(point), n, include_p).iter().map(Jet::value).collect();
    Ok(LieStack { order: n, includes_p: include_p, values, base_point: point.to_vec() })
}

/// Jacobian of `F^(n)` at `point`, shape `[(n+1) d_p × (d_p + d_q)]`.
pub fn jacobian_f(field: &dyn VectorFieldPair, point: &[f64], n: usize) -> Result<DMatrix<f64>> {
    ensure!(n >= 1, Config, "Lie stack order must be at least 1");
    check_point(field, point)?;
    let d = field.dim();
    let rows = (n + 1) * field.dim_p();
    let mut jac = DMatrix::zeros(rows, d);
    for j in 0..d {
        let x: Vec<Jet> = point
            .iter()
            .enumerate()
            .map(|(i, &v)| Jet::seeded(v, if i == j { 1.0 } else { 0.0 }))
            .collect();
        for (r, e) in stack_jets(field, &x, n, true).iter().enumerate() {
            jac[(r, j)] = e.coeffs().get(1).copied().unwrap_or(0.0);
        }
    }
    Ok(jac)
}

/// Linear reduction `L: ℝ^{(n+1) d_p} → ℝ^{d_p + d_q}` applied to the Lie stack.
#[derive(Clone, Debug, PartialEq)]
pub enum Reduction {
    /// Keep the first `d_p + d_q` rows of `F^(n)`.
    IdentityExtension,
    Matrix(DMatrix<f64>),
}

impl Reduction {
    pub fn matrix(&self, field: &dyn VectorFieldPair, n: usize) -> Result<DMatrix<f64>> {
        let d = field.dim();
        let cols = (n + 1) * field.dim_p();
        match self {
            Reduction::IdentityExtension => {
                ensure!(
                    cols >= d,
                    Config,
                    "(n+1)·d_p = {cols} < d_p + d_q = {d}: identity extension cannot reach full rank"
                );
                Ok(DMatrix::from_fn(d, cols, |i, j| if i == j { 1.0 } else { 0.0 }))
            }
            Reduction::Matrix(l) => {
                ensure!(
                    l.nrows() == d && l.ncols() == cols,
                    Shape,
                    "L has shape {}×{}, expected {d}×{cols}",
                    l.nrows(),
                    l.ncols()
                );
                Ok(l.clone())
            }
        }
    }
}

/// `D(L F^(n))` at `point`.
pub fn jacobian_lf(field: &dyn VectorFieldPair, point: &[f64], n: usize, l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let jf = jacobian_f(field, point, n)?;
    ensure!(
        l.ncols() == jf.nrows() && l.nrows() == field.dim(),
        Shape,
        "L has shape {}×{}, expected {}×{}",
        l.nrows(),
        l.ncols(),
        field.dim(),
        jf.nrows()
    );
    Ok(l * jf)
}

/// Outcome of the numerical observability-rank test at one point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub n: usize,
    pub point: Vec<f64>,
    #[serde(rename = "L")]
    pub l: Vec<Vec<f64>>,
    pub jacobian: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub satisfied: bool,
    pub tolerance: f64,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Numerical rank of `D(L F^(n))`: singular values above `tolerance · σ_max`.
pub fn check_observability(
    field: &dyn VectorFieldPair,
    point: &[f64],
    n: usize,
    reduction: &Reduction,
    tolerance: f64,
) -> Result<RankReport> {
    ensure!(n >= 1, Config, "Lie stack order must be at least 1");
    ensure!(
        tolerance > 0.0 && tolerance <= 1e-3,
        Config,
        "rank tolerance must lie in (0, 1e-3], got {tolerance}"
    );
    let l = reduction.matrix(field, n)?;
    let jac = jacobian_lf(field, point, n, &l)?;
    let mut sv: Vec<f64> = jac.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let smax = sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|&&s| s > tolerance * smax && s > 0.0).count();
    let d = field.dim();
    Ok(RankReport {
        n,
        point: point.to_vec(),
        l: rows_of(&l),
        jacobian: rows_of(&jac),
        singular_values: sv,
        rank,
        satisfied: rank == d,
        tolerance,
    })
}

/// Region-level summary of the rank test over sampled points.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScanSummary {
    pub count: usize,
    pub satisfied: usize,
    pub fraction: f64,
    pub failures: Vec<RankReport>,
}

/// Runs [`check_observability`] at `sampler(0..count)`.
pub fn scan_region(
    field: &(dyn VectorFieldPair + Sync),
    sampler: &(dyn Fn(usize) -> Vec<f64> + Sync),
    n: usize,
    count: usize,
    tolerance: f64,
) -> Result<ScanSummary> {
    use rayon::prelude::*;
    ensure!(count >= 1, Config, "scan needs at least one point");
    let reports: Vec<RankReport> = (0..count)
        .into_par_iter()
        .map(|i| check_observability(field, &sampler(i), n, &Reduction::IdentityExtension, tolerance))
        .collect::<Result<_>>()?;
    let satisfied = reports.iter().filter(|r| r.satisfied).count();
    let failures = reports.into_iter().filter(|r| !r.satisfied).collect();
    Ok(ScanSummary { count, satisfied, fraction: satisfied as f64 / count as f64, failures })
}

/// The matrix `D(L F^(2))` for Lorenz '63 observed through `x` with `L = I`,
/// written out by hand.
pub fn lorenz63_analytic_jacobian(point: &[f64; 3], sigma: f64, rho: f64) -> DMatrix<f64> {
    let (x0, _, z0) = (point[0], point[1], point[2]);
    DMatrix::from_row_slice(
        3,
        3,
        &[
            1.0,
            0.0,
            0.0,
            -sigma,
            sigma,
            0.0,
            sigma * (rho + sigma - z0),
            -sigma * (sigma + 1.0),
            -sigma * x0,
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::SystemSpec;

    fn l63x() -> SystemField {
        SystemField::new(&SystemSpec::lorenz63(&[0]).unwrap()).unwrap()
    }

    #[test]
    fn lie_of_identity_on_p_is_f() {
        let field = l63x();
        let h = |x: &[Jet]| vec![x[0].clone()];
        let v = lie_derivative(&field, &h, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(v, vec![0.0]);
        let v = lie_derivative(&field, &h, &[1.0, 3.0, 1.0]).unwrap();
        assert_eq!(v, vec![20.0]);
    }

    #[test]
    fn lie_of_constant_is_zero() {
        let field = l63x();
        let h = |_: &[Jet]| vec![Jet::constant(4.2)];
        assert_eq!(lie_derivative(&field, &h, &[0.3, -2.0, 7.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn zeroth_lie_is_f() {
        let field = l63x();
        let s = build_f(&field, &[2.0, 5.0, 1.0], 1, false).unwrap();
        assert_eq!(s.values, vec![30.0]);
    }

    #[test]
    fn l63_second_stack_matches_closed_form() {
        let (s, r) = (10.0, 28.0);
        let field = l63x();
        let (x0, y0, z0) = (1.5, -2.0, 17.0);
        let st = build_f(&field, &[x0, y0, z0], 2, true).unwrap();
        let expect = [x0, s * (y0 - x0), s * (x0 * (r - z0) - y0 - s * (y0 - x0))];
        for (a, b) in st.values.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let st2 = build_f(&field, &[x0, y0, z0], 2, false).unwrap();
        assert_eq!(&st.values[1..], &st2.values[..]);
    }

    #[test]
    fn identity_extension_needs_enough_rows() {
        let field = l63x();
        assert!(matches!(
            check_observability(&field, &[1.0, 1.0, 1.0], 1, &Reduction::IdentityExtension, 1e-8),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tolerance_range_enforced() {
        let field = l63x();
        for tol in [0.0, 1e-2] {
            assert!(check_observability(&field, &[1.0, 1.0, 1.0], 2, &Reduction::IdentityExtension, tol).is_err());
        }
    }

    #[test]
    fn l63_rank_examples() {
        let field = l63x();
        let r = check_observability(&field, &[1.0, 1.0, 1.0], 2, &Reduction::IdentityExtension, 1e-8).unwrap();
        assert!(r.satisfied);
        assert_eq!(r.rank, 3);
        let r = check_observability(&field, &[0.0, 4.0, -3.0], 2, &Reduction::IdentityExtension, 1e-8).unwrap();
        assert!(!r.satisfied);
        assert_eq!(r.rank, 2);
    }

    #[test]
    fn custom_reduction_shape_checked() {
        let field = l63x();
        let bad = Reduction::Matrix(DMatrix::zeros(3, 4));
        assert!(matches!(
            check_observability(&field, &[1.0, 1.0, 1.0], 2, &bad, 1e-8),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn scan_rejects_empty() {
        let field = l63x();
        let sampler = |_: usize| vec![1.0, 1.0, 1.0];
        assert!(matches!(scan_region(&field, &sampler, 2, 0, 1e-8), Err(Error::Config(_))));
        let s = scan_region(&field, &sampler, 2, 5, 1e-8).unwrap();
        assert_eq!(s.fraction, 1.0);
    }

    #[test]
    fn rank_report_serializes_named_fields() {
        let field = l63x();
        let r = check_observability(&field, &[1.0, 1.0, 1.0], 2, &Reduction::IdentityExtension, 1e-8).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        for key in ["n", "L", "jacobian", "singular_values", "rank", "satisfied", "tolerance"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
