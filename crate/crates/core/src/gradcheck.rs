//! Central finite-difference checks for analytic gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// A scalar function with an analytic gradient.
pub trait ScalarFunction {
    fn value(&mut self, x: &Tensor) -> Result<f64>;
    fn gradient(&mut self, x: &Tensor) -> Result<Tensor>;
}

/// Adapts a pair of closures to [`ScalarFunction`].
pub struct FnPair<F, G> {
    pub value: F,
    pub gradient: G,
}

impl<F, G> ScalarFunction for FnPair<F, G>
where
    F: FnMut(&Tensor) -> Result<f64>,
    G: FnMut(&Tensor) -> Result<Tensor>,
{
    fn value(&mut self, x: &Tensor) -> Result<f64> {
        (self.value)(x)
    }
    fn gradient(&mut self, x: &Tensor) -> Result<Tensor> {
        (self.gradient)(x)
    }
}

/// `|a − c| / max(|a|, |c|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Max relative error between the analytic gradient and central
/// differences over every coordinate of `point`.
pub fn finite_diff_check(f: &mut impl ScalarFunction, point: &Tensor, step: f64) -> Result<f64> {
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_diff_check_coords(f, point, step, &coords)
}

/// As [`finite_diff_check`], restricted to `coords`.
pub fn finite_diff_check_coords(
    f: &mut impl ScalarFunction,
    point: &Tensor,
    step: f64,
    coords: &[usize],
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {step}")));
    }
    let analytic = f.gradient(point)?;
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for &k in coords {
        let x0 = point.data()[k];
        probe.data_mut()[k] = x0 + step;
        let up = f.value(&probe)?;
        probe.data_mut()[k] = x0 - step;
        let down = f.value(&probe)?;
        probe.data_mut()[k] = x0;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteLoss(format!("function value at coordinate {k}")));
        }
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[k], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn graph_fn(build: fn(&mut Graph, crate::graph::NodeId) -> crate::graph::NodeId) -> impl ScalarFunction {
        FnPair {
            value: move |x: &Tensor| {
                let mut g = Graph::new();
                let p = g.input("x", x.clone());
                let l = build(&mut g, p);
                Ok(g.value(l).data()[0])
            },
            gradient: move |x: &Tensor| {
                let mut g = Graph::new();
                let p = g.param("x", x.clone());
                let l = build(&mut g, p);
                Ok(g.backward(l, &[p])?.remove(0))
            },
        }
    }

    #[test]
    fn square_at_three() {
        let mut f = graph_fn(|g, x| {
            let y = g.mul(x, x).unwrap();
            g.sum(y).unwrap()
        });
        let err = finite_diff_check(&mut f, &Tensor::vector(alloc::vec![3.0]), 1e-6).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn tanh_at_half() {
        let mut f = graph_fn(|g, x| {
            let y = g.tanh(x).unwrap();
            g.sum(y).unwrap()
        });
        let err = finite_diff_check(&mut f, &Tensor::vector(alloc::vec![0.5]), 1e-6).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let mut f = FnPair { value: |_: &Tensor| Ok(f64::NAN), gradient: |x: &Tensor| Ok(x.clone()) };
        assert!(finite_diff_check(&mut f, &Tensor::vector(alloc::vec![1.0]), 1e-6).is_err());
        assert!(finite_diff_check(&mut f, &Tensor::vector(alloc::vec![1.0]), 0.0).is_err());
    }
}
