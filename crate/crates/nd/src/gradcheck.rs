//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that gradients that are
/// numerically zero compare on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Checks every parameter element (at most `max_per_param` evenly strided
/// elements per tensor) of `loss_fn` against central differences.
pub fn check_gradients<F>(
    params: &ParamStore<f64>,
    loss_fn: F,
    step: f64,
    max_per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>) -> Result<Var>,
{
    let tape = Tape::with_params(params);
    let loss = loss_fn(&tape)?;
    let grads = tape.backward(loss)?;
    drop(tape);

    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let t = Tape::with_params(p);
        let l = loss_fn(&t)?;
        Ok(t.value(l).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work = params.clone();
    for id in params.ids() {
        let n = params.get(id).numel();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = params.name(id).to_string();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
