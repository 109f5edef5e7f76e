use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub coordinates: usize,
    pub passed: bool,
}

/// Compares the tape gradient of `f` at `x` with central differences
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`, coordinate by coordinate.
///
/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&mut tape, leaf)?;
    tape.backward(root)?;
    let analytic = tape
        .grad(leaf)
        .ok_or_else(|| Error::Contract("leaf lost its gradient".into()))?
        .clone();

    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let root = f(&mut tape, v)?;
        Ok(tape.value(root).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        coordinates: x.numel(),
        passed: true,
    };
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
