//! Central finite-difference gradient verification.
//!
//! The checker re-runs a user-supplied forward builder with perturbed
//! parameter stores and compares the analytic gradient of every selected
//! parameter element against (f(p+h) - f(p-h)) / 2h. It is the independent
//! oracle used by every differentiable module's tests.

use crate::adam::ParamStore;
use crate::error::{Error, Result};
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// A relu input came within `h` of the kink during evaluation, so the
    /// central difference is unreliable for this parameter.
    SkippedKink,
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub status: CheckStatus,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.per_param.iter().all(|p| p.status != CheckStatus::Fail)
    }
}

/// Relative error with an absolute floor so tiny gradients compare sanely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Verify analytic gradients of `loss_of` w.r.t. the selected parameters.
///
/// `loss_of` must build a fresh tape from the given store and return the
/// scalar loss node's value along with the tape (so relu kink proximity can
/// be inspected). `param_subset` of `None` checks every parameter.
pub fn finite_diff_check<F>(
    params: &ParamStore,
    param_subset: Option<&[usize]>,
    h: f64,
    tol: f64,
    mut loss_of: F,
) -> Result<CheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Tape, f64)>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::contract(format!("finite_diff_check: h={} outside (0, 1e-2]", h)));
    }
    let all: Vec<usize> = (0..params.len()).collect();
    let subset = param_subset.unwrap_or(&all);

    // Analytic gradients once at the base point.
    let (base_tape, _) = loss_of(params)?;
    let loss_node = base_tape.len() - 1;
    let mut grads = base_tape.backward(loss_node)?;
    let analytic = base_tape.param_grads(&mut grads, params.len());

    let mut per_param = Vec::with_capacity(subset.len());
    let mut global_max = 0.0f64;
    for &pid in subset {
        let n = params.value(pid).len();
        let mut max_err = 0.0f64;
        let mut kink = false;
        for j in 0..n {
            let mut plus = params.clone();
            plus.params[pid].value.data_mut()[j] += h;
            let mut minus = params.clone();
            minus.params[pid].value.data_mut()[j] -= h;
            let (tp, fp) = loss_of(&plus)?;
            let (tm, fm) = loss_of(&minus)?;
            if tp.min_abs_relu_input() <= h || tm.min_abs_relu_input() <= h {
                kink = true;
            }
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[pid].as_ref().map_or(0.0, |g| g.data()[j]);
            max_err = max_err.max(rel_err(an, fd));
        }
        let status = if kink && max_err >= tol {
            CheckStatus::SkippedKink
        } else if max_err < tol {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        if status != CheckStatus::SkippedKink {
            global_max = global_max.max(max_err);
        }
        per_param.push(ParamCheck {
            name: params.params[pid].name.clone(),
            max_rel_err: max_err,
            status,
        });
    }
    Ok(CheckReport { per_param, max_rel_err: global_max })
}
