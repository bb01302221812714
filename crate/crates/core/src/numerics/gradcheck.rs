//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)` for a
/// scalar function of one tensor.
pub fn check_gradients<F>(f: F, x0: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    check_gradients_many(|t, v| f(t, v[0]), std::slice::from_ref(x0), eps)
}

/// [`check_gradients`] over several inputs at once; the error is the max
/// over every coordinate of every input.
pub fn check_gradients_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        let vars = xs
            .iter()
            .map(|x| t.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&t, &vars)?;
        let v = t.value(out);
        if v.len() != 1 {
            return Err(Error::shape(
                "check_gradients",
                "function is not scalar-valued",
            ));
        }
        Ok(v.item())
    };

    let t = Tape::new();
    let vars = inputs
        .iter()
        .map(|x| t.leaf(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&t, &vars)?;
    let grads = t.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
        })
        .collect();

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
