//! Central finite-difference verification of tape gradients.

use super::params::ParamSet;
use super::tape::{AutodiffError, Tape, Var};

/// Outcome of a finite-difference sweep over every parameter
/// coordinate.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coords_checked: usize,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Compares tape gradients of `build_loss` against central differences
/// `(f(x+h) - f(x-h)) / 2h` for every coordinate of every parameter.
///
/// `build_loss` must be deterministic (disable dropout and gating
/// noise, or reseed identically on each call). Relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-4)` so near-zero
/// gradients are compared absolutely.
pub fn finite_diff_check<F>(
    params: &mut ParamSet,
    mut build_loss: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: FnMut(&ParamSet, &mut Tape) -> Result<Var, AutodiffError>,
{
    params.zero_grads();
    let mut tape = Tape::new();
    let loss = build_loss(params, &mut tape)?;
    tape.backward(loss, params)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad.clone()).collect();

    let mut eval = |params: &ParamSet| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let loss = build_loss(params, &mut tape)?;
        Ok(tape.scalar(loss))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        tolerance,
        coords_checked: 0,
        worst: None,
    };
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for (slot, id) in ids.into_iter().enumerate() {
        for (i, &a) in analytic[slot].iter().enumerate() {
            let orig = params.get(id).value[i];
            params.get_mut(id).value[i] = orig + step;
            let f_plus = eval(params)?;
            params.get_mut(id).value[i] = orig - step;
            let f_minus = eval(params)?;
            params.get_mut(id).value[i] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}
