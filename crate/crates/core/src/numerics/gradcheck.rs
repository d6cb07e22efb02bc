use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Compares the tape gradient of a scalar function with central differences.
///
/// `f` receives a fresh graph and the leaf holding the evaluation point and
/// must return a single-element node. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_coords(f, point, h, None)
}

/// Like [`grad_check`] but only probes the listed flat coordinates.
pub fn grad_check_coords<F>(f: F, point: &Tensor<f64>, h: f64, coords: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.param(p);
        let y = f(&mut g, x)?;
        let v = g.value(y).item();
        if !v.is_finite() {
            return Err(Error::numeric("non-finite function value during finite differencing"));
        }
        Ok(v)
    };

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
