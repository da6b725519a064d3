//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Largest discrepancy found by [`gradcheck`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Denominator floor for the relative error. Entries smaller than this are
/// compared absolutely: with a step of 1e-6 the central difference carries
/// roundoff around 1e-10, which would swamp the relative error of a
/// gradient entry near 1e-6.
pub const REL_FLOOR: f64 = 1e-4;

/// Compares reverse-mode gradients of `loss(tape, params)` against central
/// differences for the entries chosen by `select(param, index)`.
pub fn gradcheck<F>(params: &[Tensor], loss: F, step: f64, select: &dyn Fn(usize, usize) -> bool) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let l = loss(&mut tape, &vars)?;
        Ok(tape.value(l).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let l = loss(&mut tape, &vars)?;
    let grads = tape.backward(l)?;
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_param: 0, worst_index: 0, checked: 0 };
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
        for i in 0..p.len() {
            if !select(pi, i) {
                continue;
            }
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + step;
            let fp = eval(&work)?;
            work[pi].data_mut()[i] = orig - step;
            let fm = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = pi;
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Checks every entry.
pub fn gradcheck_all<F>(params: &[Tensor], loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradcheck(params, loss, FD_STEP, &|_, _| true)
}
