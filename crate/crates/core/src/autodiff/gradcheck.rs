use super::{Tape, Var};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-12)`
    pub max_rel_error: f64,
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let v = tape.constant(x);
    let y = f(&tape, v);
    if y.numel() != 1 {
        return Err(contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            y.shape()
        )));
    }
    Ok(y.item())
}

/// Maximum relative error between the tape gradient of `f` at `x` and a
/// central finite-difference estimate with step `eps`.
pub fn check_gradients<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    check_gradients_with(f, x, eps).map(|c| c.max_rel_error)
}

pub fn check_gradients_with<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(contract(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let tape = Tape::new();
    let v = tape.leaf(x);
    let y = f(&tape, v);
    if y.numel() != 1 {
        return Err(contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            y.shape()
        )));
    }
    tape.backward(y)?;
    let analytic = tape.grad_or_zeros(v);

    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let (hi, lo) = (orig + eps, orig - eps);
        probe.data_mut()[i] = hi;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = lo;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        // Divide by the representable step, not the nominal one.
        numeric.push((plus - minus) / (hi - lo));
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-12))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_error,
    })
}
