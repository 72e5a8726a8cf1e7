//! Central-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely. Central
/// differences at step 1e-5 carry roughly 1e-11 of rounding noise, so a
/// smaller floor would flag exact zeros (e.g. a bias feeding batchnorm).
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Per-entry relative error `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor2]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.shape(out) != (1, 1) {
        return Err(Error::Contract("gradcheck function must return a scalar".into()));
    }
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite("gradcheck function value".into()));
    }
    Ok(v)
}

/// Analytic gradients of `f` at `params` from the tape.
pub fn analytic_gradients<F>(f: &F, params: &[Tensor2]) -> Result<Vec<Tensor2>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.scalar(out).is_finite() {
        return Err(Error::NonFinite("gradcheck function value".into()));
    }
    let mut grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .map(|v| grads.take(*v).expect("every param receives a gradient"))
        .collect())
}

/// Largest relative error between `analytic` and central differences of `f`.
pub fn compare_gradients<F>(f: &F, params: &[Tensor2], analytic: &[Tensor2], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor2> = params.to_vec();
    let mut worst = 0.0_f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for k in 0..work[pi].len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + step;
            let plus = evaluate(f, &work)?;
            work[pi].data_mut()[k] = orig - step;
            let minus = evaluate(f, &work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[k], numeric));
        }
    }
    Ok(worst)
}

/// Max relative error of the tape gradient of `f` against central
/// differences with the given step.
pub fn gradcheck<F>(f: F, params: &[Tensor2], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, params)?;
    compare_gradients(&f, params, &analytic, step)
}
