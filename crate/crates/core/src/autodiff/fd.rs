use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Pins a closure to the higher-ranked signature the checkers expect.
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'g> Fn(Var<'g>) -> Result<Var<'g>>,
{
    f
}

/// Central-difference gradient of a scalar function at `point`.
pub fn fd_gradient<F>(f: &F, point: &Tensor, step: f64) -> Result<Tensor>
where
    F: for<'g> Fn(Var<'g>) -> Result<Var<'g>>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let g = Graph::new();
        let x = g.constant(t);
        let y = f(x)?.item();
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("function value {y}")));
        }
        Ok(y)
    };
    let mut grad = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut hi = point.clone();
        hi.data_mut()[i] += step;
        let mut lo = point.clone();
        lo.data_mut()[i] -= step;
        grad.push((eval(hi)? - eval(lo)?) / (2.0 * step));
    }
    Tensor::new(point.shape().to_vec(), grad)
}

/// Analytic gradient and central-difference gradient at `point`.
pub fn fd_compare<F>(f: F, point: &Tensor, step: f64) -> Result<(Tensor, Tensor)>
where
    F: for<'g> Fn(Var<'g>) -> Result<Var<'g>>,
{
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::Config(format!(
            "finite-difference step {step} outside (0, 1e-3]"
        )));
    }
    if !point.is_finite() {
        return Err(Error::NonFinite("evaluation point".into()));
    }
    let g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(x)?;
    if !y.item().is_finite() {
        return Err(Error::NonFinite(format!("function value {}", y.item())));
    }
    let grads = g.grad(y, &[x], false)?;
    let analytic = grads.in_order()[0].value().as_ref().clone();
    if !analytic.is_finite() {
        return Err(Error::NonFinite("analytic gradient".into()));
    }
    let numeric = fd_gradient(&f, point, step)?;
    Ok((analytic, numeric))
}

/// Largest relative disagreement between the analytic gradient and central
/// differences: `max |analytic - fd| / (|fd| + 1e-12)`.
pub fn fd_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: for<'g> Fn(Var<'g>) -> Result<Var<'g>>,
{
    let (analytic, numeric) = fd_compare(f, point, step)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-12))
        .fold(0.0, f64::max))
}

/// `max |a - n| / max |n|`, with the denominator floored at 1e-6.
pub fn scaled_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, o| m.max(o.abs())).max(1e-6);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, o)| m.max((a - o).abs()))
        / scale
}
