//! Central finite-difference verification of tape gradients.
//!
//! The checker builds the loss once, takes analytic gradients, then
//! replays the same tape with each parameter component nudged by ±step.
//! Components with `|analytic| >= 1e-6` are compared relatively (the
//! denominator is `max(|analytic|, |numeric|)`); smaller components fall
//! back to an absolute comparison, since relative error is meaningless
//! near zero.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Gradient magnitude below which the absolute comparison is used.
pub const SMALL_GRAD: f64 = 1e-6;

/// Worst-case errors for one parameter tensor.
#[derive(Debug, Clone, Copy, Default)]
pub struct ParamCheck {
    /// Max relative error over components with `|analytic| >= SMALL_GRAD`.
    pub rel_error: f64,
    /// Max absolute error over components with `|analytic| < SMALL_GRAD`.
    pub abs_error: f64,
}

/// Result of [`finite_diff_check`].
#[derive(Debug, Clone, Default)]
pub struct FiniteDiffReport {
    pub per_param: BTreeMap<String, ParamCheck>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl FiniteDiffReport {
    /// True when every component is within tolerance.
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel_error <= rel_tol && self.max_abs_error <= abs_tol
    }
}

/// Compares analytic gradients against central differences of step `step`.
///
/// `build` must construct the loss on the given tape, registering (via
/// [`Tape::param`]) exactly the parameters in `params` with exactly those
/// values. The loss node it returns must be scalar.
pub fn finite_diff_check<F>(
    build: F,
    params: &BTreeMap<String, Tensor>,
    step: f64,
) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape, &BTreeMap<String, Tensor>) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(CoreError::Contract(format!("step must be positive, got {step}")));
    }

    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let loss_value = tape.value(loss).scalar_value()?;
    if !loss_value.is_finite() {
        return Err(CoreError::NonFinite("finite_diff_check loss"));
    }
    let registered: Vec<String> = tape.params().keys().cloned().collect();
    let expected: Vec<String> = params.keys().cloned().collect();
    if registered != expected {
        return Err(CoreError::Contract(format!(
            "builder registered {registered:?}, expected {expected:?}"
        )));
    }
    let analytic = tape.gradient(loss)?;

    let mut base: BTreeMap<NodeId, Tensor> = BTreeMap::new();
    for id in tape.leaves() {
        base.insert(id, tape.value(id).clone());
    }

    let mut report = FiniteDiffReport::default();
    for (name, &pid) in tape.params() {
        let grad = analytic.get(name).expect("gradient entry per parameter");
        let mut check = ParamCheck::default();
        for i in 0..grad.len() {
            let probe = |delta: f64| -> Result<f64> {
                let mut bindings = base.clone();
                let slot = bindings.get_mut(&pid).expect("param leaf bound");
                slot.data_mut()[i] += delta;
                let values = tape.evaluate(&bindings)?;
                let f = values[loss.0].scalar_value()?;
                if !f.is_finite() {
                    return Err(CoreError::NonFinite("finite_diff_check probe"));
                }
                Ok(f)
            };
            let f_plus = probe(step)?;
            let f_minus = probe(-step)?;
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let an = grad.data()[i];
            let diff = (numeric - an).abs();
            if an.abs() < SMALL_GRAD {
                check.abs_error = check.abs_error.max(diff);
            } else {
                let denom = an.abs().max(numeric.abs());
                check.rel_error = check.rel_error.max(diff / denom);
            }
        }
        report.max_rel_error = report.max_rel_error.max(check.rel_error);
        report.max_abs_error = report.max_abs_error.max(check.abs_error);
        report.per_param.insert(name.clone(), check);
    }
    Ok(report)
}
