//! Central finite-difference oracle for tape gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn evaluate<F>(f: &F, params: &[Tensor], record: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), record)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.is_stochastic() {
        return Err(Error::Numerical(
            "function under check uses train-mode dropout; finite differences need a deterministic function".into(),
        ));
    }
    let v = tape.value(out);
    if v.shape() != (1, 1) {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got {:?}",
            v.shape()
        )));
    }
    if !v.item().is_finite() {
        return Err(Error::Numerical(format!("function value {} is not finite", v.item())));
    }
    Ok((tape, vars, out))
}

/// Compares tape gradients of `f` against central differences with step `eps`
/// on every coordinate of `params`.
///
/// Returns the maximum over coordinates of `|fd - g| / max(|g|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, vars, out) = evaluate(&f, params, true)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
        })
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, g) in analytic.iter().enumerate() {
        for k in 0..g.len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let (t, _, o) = evaluate(&f, &work, false)?;
            let plus = t.value(o).item();
            work[pi].data_mut()[k] = orig - eps;
            let (t, _, o) = evaluate(&f, &work, false)?;
            let minus = t.value(o).item();
            work[pi].data_mut()[k] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let ga = g.data()[k];
            let rel = (fd - ga).abs() / ga.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
