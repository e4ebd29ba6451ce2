//! Central-difference gradient checking.

use super::{Tape, Var};
use crate::error::{AcrError, Result};
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero are judged by absolute error instead.
pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-6;

/// One-sided slopes that disagree by more than this (relative to
/// `max(1, |slope|)`) mark a non-smooth point; such coordinates are skipped.
const KINK_TOLERANCE: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// Compares the tape gradient of `f` at `x` against central differences on
/// every coordinate of `x`.
///
/// `f` receives a fresh tape and the handle of `x` on it, and must return a
/// scalar.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_coords(f, x, step, None)
}

/// Like [`grad_check`] but restricted to the listed flat coordinates.
pub fn grad_check_coords<F>(
    f: F,
    x: &Tensor,
    step: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(AcrError::Contract("finite-difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone())?;
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape.grad(xv)?;

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(t.clone())?;
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };
    let f0 = eval(x)?;

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut probe = x.clone();
    for &j in coords {
        if j >= x.numel() {
            return Err(AcrError::Contract(format!("coordinate {j} out of range")));
        }
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + step;
        let fp = eval(&probe)?;
        probe.data_mut()[j] = orig - step;
        let fm = eval(&probe)?;
        probe.data_mut()[j] = orig;

        let central = (fp - fm) / (2.0 * step);
        let forward = (fp - f0) / step;
        let backward = (f0 - fm) / step;
        if (forward - backward).abs() > KINK_TOLERANCE * central.abs().max(1.0) {
            report.skipped_kinks += 1;
            continue;
        }
        let a = analytic.data()[j];
        let rel = (a - central).abs() / a.abs().max(central.abs()).max(GRAD_CHECK_ABS_FLOOR);
        report.checked += 1;
        if report.worst_coordinate.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = Some(j);
            report.analytic_at_worst = a;
            report.numeric_at_worst = central;
        }
    }
    Ok(report)
}
