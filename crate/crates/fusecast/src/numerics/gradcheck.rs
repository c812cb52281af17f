//! Central-difference verification of tape gradients.
//!
//! The harness runs the supplied evaluation once with gradients enabled,
//! snapshots the analytic gradient of every trainable scalar, then perturbs
//! each scalar by +/- step and compares (f+ - f-) / (2 step) against it.
//! It is the independent oracle for every learnable block, so it must not
//! share code with the tape beyond parameter storage.

use std::collections::BTreeMap;

use super::param::ParamSet;
use crate::error::{Error, Result};

/// |a - n| / max(|a|, |n|, 1e-8); symmetric and safe near zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone)]
pub struct WorstEntry {
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst: Option<WorstEntry>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_err))
    }

    pub fn worst_param(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    /// Max relative error per dotted name prefix ("fusion.w_q" -> "fusion").
    pub fn group_max(&self) -> BTreeMap<String, f64> {
        let mut groups = BTreeMap::new();
        for p in &self.params {
            let group = p.name.split('.').next().unwrap_or(&p.name).to_string();
            let entry = groups.entry(group).or_insert(0.0f64);
            *entry = entry.max(p.max_rel_err);
        }
        groups
    }
}

/// Check analytic gradients against central differences.
///
/// `eval(params, want_grads)` must run the forward pass and return the scalar
/// loss; when `want_grads` is true it must also accumulate gradients into
/// `params` (which arrive zeroed). The function must be deterministic in the
/// parameter values. Parameter values are restored before returning.
pub fn grad_check<F>(params: &mut ParamSet, mut eval: F, step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamSet, bool) -> Result<f64>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::invalid(format!("nonpositive fd step {step}")));
    }
    params.zero_grads();
    let loss = eval(params, true)?;
    if !loss.is_finite() {
        return Err(Error::GradCheck {
            param: "<base>".into(),
            reason: format!("base loss is not finite: {loss}"),
        });
    }
    let analytic: Vec<(String, super::Matrix, bool)> = params
        .iter()
        .map(|p| (p.name.clone(), p.grad.clone(), p.trainable))
        .collect();

    let ids: Vec<_> = params.ids().collect();
    let mut checks = Vec::new();
    for (pid, (name, grad, trainable)) in ids.into_iter().zip(analytic) {
        if !trainable {
            continue;
        }
        let (rows, cols) = grad.shape();
        let mut check = ParamCheck { name: name.clone(), entries: rows * cols, max_rel_err: 0.0, worst: None };
        for r in 0..rows {
            for c in 0..cols {
                let original = params.get(pid).value.get(r, c);
                params.get_mut(pid).value.set(r, c, original + step);
                let f_plus = eval(params, false)?;
                params.get_mut(pid).value.set(r, c, original - step);
                let f_minus = eval(params, false)?;
                params.get_mut(pid).value.set(r, c, original);
                if !f_plus.is_finite() || !f_minus.is_finite() {
                    return Err(Error::GradCheck {
                        param: name,
                        reason: format!("non-finite perturbed loss at ({r}, {c})"),
                    });
                }
                let numeric = (f_plus - f_minus) / (2.0 * step);
                let err = relative_error(grad.get(r, c), numeric);
                if err > check.max_rel_err || check.worst.is_none() {
                    check.max_rel_err = err;
                    check.worst = Some(WorstEntry { row: r, col: c, analytic: grad.get(r, c), numeric });
                }
            }
        }
        checks.push(check);
    }
    Ok(GradCheckReport { loss, params: checks })
}
