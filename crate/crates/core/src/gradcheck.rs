//! Central-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

/// Compares the tape gradient of `f` at `x` against central differences with step `h`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: for<'g> Fn(&mut Graph<'g>, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g.grad(xv).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec);

    let eval = |t: &Tensor| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    compare(&analytic, eval, x, h)
}

/// Like [`grad_check`] for functions that run their own graph: `value(x)`
/// returns the scalar output and `analytic` is its gradient at `x`.
pub fn check_against<F, E>(value: F, analytic: &[f64], x: &Tensor, h: f64) -> Result<f64, E>
where
    F: Fn(&Tensor) -> Result<f64, E>,
{
    compare(analytic, value, x, h)
}

fn compare<F, E>(analytic: &[f64], eval: F, x: &Tensor, h: f64) -> Result<f64, E>
where
    F: Fn(&Tensor) -> Result<f64, E>,
{
    assert!(h > 0.0, "step must be positive");
    assert_eq!(analytic.len(), x.numel(), "gradient length must match the input");
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
