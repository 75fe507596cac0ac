//! Central-difference gradient checking in 64-bit precision.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Compare the analytic gradient of scalar `f` at `x` against central
/// differences with step `h`.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`. `f` must be deterministic.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.dims()));

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe);
        let l = f(&mut g, v)?;
        Ok(g.value(l).data()[0])
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_is_exact() {
        let x = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let y = g.scale(x, 3.0)?;
                g.sum(y)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let x = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let y = g.mul(x, x)?;
                g.sum(y)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
