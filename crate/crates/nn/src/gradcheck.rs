//! Central finite-difference gradient checking.

use crate::params::{Grads, ParamStore};
use crate::tape::{Tape, Var};

/// Worst relative error found by [`check`], with where it occurred.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares the tape's analytic gradient of `loss_fn` with central
/// differences of step `h`, for every scalar of every parameter.
///
/// Relative error is `|a - n| / max(|a| + |n|, floor)`; the floor keeps
/// entries whose true gradient is zero from dominating.
pub fn check(
    params: &ParamStore<f64>,
    h: f64,
    floor: f64,
    loss_fn: impl Fn(&mut Tape<'_, f64>) -> Var,
) -> GradCheckReport {
    let analytic: Grads<f64> = {
        let mut tape = Tape::new(params);
        let loss = loss_fn(&mut tape);
        tape.backward(loss)
    };
    let eval = |p: &ParamStore<f64>| {
        let mut tape = Tape::new(p);
        let loss = loss_fn(&mut tape);
        tape.value(loss).item()
    };
    let mut probe = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_param: String::new(), worst_index: 0, checked: 0 };
    for id in params.ids() {
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(&probe);
            probe.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(&probe);
            probe.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[j]);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = params.name(id).to_string();
                report.worst_index = j;
            }
        }
    }
    report
}
