//! Central finite-difference verification of analytic gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-5;

/// Relative error with a floor of 1e-3 on the denominator, so gradient
/// components near zero are judged by absolute error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Gradients of `build` at `inputs` computed by the tape.
pub fn tape_gradients<F>(inputs: &[Tensor], build: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect())
}

pub fn evaluate<F>(inputs: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.item(out))
}

/// Compares `analytic` against central differences of `value` at every
/// input coordinate and returns the largest relative error.
#[allow(clippy::needless_range_loop)]
pub fn max_rel_error<V, G>(inputs: &[Tensor], value: V, analytic: G) -> Result<f64>
where
    V: Fn(&[Tensor]) -> Result<f64>,
    G: Fn(&[Tensor]) -> Result<Vec<Vec<f64>>>,
{
    let grads = analytic(inputs)?;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x = inputs[i].values()[j];
            probe[i].values_mut()[j] = x + FD_STEP;
            let up = value(&probe)?;
            probe[i].values_mut()[j] = x - FD_STEP;
            let down = value(&probe)?;
            probe[i].values_mut()[j] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[i][j], numeric));
        }
    }
    Ok(worst)
}

/// Finite-difference check of a tape-built scalar objective.
pub fn check<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    max_rel_error(
        inputs,
        |x| evaluate(x, &build),
        |x| tape_gradients(x, &build),
    )
}

/// Reduces any tensor to a scalar through fixed weights so every output
/// coordinate contributes to the checked gradient.
pub fn weighted_sum(tape: &mut Tape, out: Var, weights: &[f64]) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::new(shape, weights.to_vec())?);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}
