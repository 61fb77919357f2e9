//! Central finite-difference checks of tape gradients.

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(TensorError::Argument(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    let s = t.data()[0];
    if !s.is_finite() {
        return Err(TensorError::Numeric(format!("function value {s} is not finite")));
    }
    Ok(s)
}

/// Compares the tape gradient of `f` with respect to every parameter in
/// `params` against central differences with the given `step`.
///
/// `params` is restored to its original values before returning; its
/// gradient accumulators are zeroed.
pub fn grad_check_params<F>(mut f: F, params: &mut ParamSet, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamSet) -> Result<Var>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(TensorError::Argument(format!("step must be positive, got {step}")));
    }
    params.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    scalar_of(&tape, loss)?;
    tape.backward(loss)?.accumulate_into(params)?;
    let analytic: Vec<Tensor> = params.iter().map(|(_, p)| p.grad.clone()).collect();
    params.zero_grad();

    let mut entries = Vec::new();
    let ids: Vec<ParamId> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        for i in 0..params.value(id).len() {
            let orig = params.value(id).data()[i];
            let mut eval = |x: f64, params: &mut ParamSet| -> Result<f64> {
                params.value_mut(id).data_mut()[i] = x;
                let mut tape = Tape::new();
                let v = f(&mut tape, params)?;
                scalar_of(&tape, v)
            };
            let plus = eval(orig + step, params);
            let minus = eval(orig - step, params);
            params.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let a = analytic[id.0].data()[i];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(TensorError::Numeric(format!(
                    "non-finite gradient for {}[{i}]",
                    params.name(id)
                )));
            }
            entries.push(GradCheckEntry {
                param: params.name(id).to_string(),
                index: i,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error <= tol,
        entries,
        max_rel_error,
        tol,
    })
}

/// Single-input form: checks `d f(x) / dx` for a function of one tensor.
pub fn grad_check<F>(mut f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut params = ParamSet::new();
    let id = params.add("x", x.clone())?;
    grad_check_params(
        |tape, ps| {
            let v = tape.param(ps, id);
            f(tape, v)
        },
        &mut params,
        step,
        tol,
    )
}
