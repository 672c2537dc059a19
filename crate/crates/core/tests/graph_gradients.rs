//! Reverse-mode gradients of the graph primitives against central
//! differences.

use lcq_core::graph::{Graph, NodeId};
use lcq_core::Tensor;
use proptest::prelude::*;

/// Checks `d/dx Σ r ⊙ op(x)` for a fixed random weighting `r`.
fn check(x: &Tensor, r: &Tensor, op: impl Fn(&mut Graph, NodeId) -> NodeId) -> Result<(), TestCaseError> {
    let value = |x: &Tensor| {
        let mut g = Graph::new();
        let p = g.input("x", x.clone());
        let y = op(&mut g, p);
        g.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut g = Graph::new();
    let p = g.param("x", x.clone());
    let y = op(&mut g, p);
    let rn = g.constant(r.clone());
    let prod = g.mul(y, rn).unwrap();
    let loss = g.sum(prod).unwrap();
    let grad = g.backward(loss, &[p]).unwrap().remove(0);
    let h = 1e-6;
    let mut probe = x.clone();
    for k in 0..x.len() {
        let x0 = x.data()[k];
        probe.data_mut()[k] = x0 + h;
        let up = value(&probe);
        probe.data_mut()[k] = x0 - h;
        let down = value(&probe);
        probe.data_mut()[k] = x0;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grad.data()[k];
        prop_assert!(
            (analytic - numeric).abs() <= 1e-6 * (1.0 + analytic.abs()),
            "coordinate {k}: analytic {analytic} numeric {numeric}"
        );
    }
    Ok(())
}

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_both_sides(x in mat(3, 4), b in mat(4, 2), r in mat(3, 2)) {
        let bb = b.clone();
        check(&x, &r, move |g, x| { let c = g.constant(bb.clone()); g.matmul(x, c).unwrap() })?;
        let xx = x.clone();
        check(&b, &r, move |g, b| { let a = g.constant(xx.clone()); g.matmul(a, b).unwrap() })?;
    }

    #[test]
    fn elementwise_ops(x in mat(2, 5), r in mat(2, 5)) {
        check(&x, &r, |g, x| g.tanh(x).unwrap())?;
        check(&x, &r, |g, x| g.gelu(x).unwrap())?;
        check(&x, &r, |g, x| g.mul(x, x).unwrap())?;
        check(&x, &r, |g, x| g.scale(x, -1.75).unwrap())?;
        let rt = Tensor::matrix(5, 2, (0..10).map(|k| r.data()[(k % 2) * 5 + k / 2]).collect()).unwrap();
        check(&x, &rt, |g, x| g.transpose(x).unwrap())?;
    }

    #[test]
    fn softmax_rows(x in mat(3, 4), r in mat(3, 4)) {
        check(&x, &r, |g, x| g.softmax(x).unwrap())?;
    }

    #[test]
    fn layer_norm_input_and_affine(x in mat(3, 6), r in mat(3, 6), gain in mat(1, 6), bias in mat(1, 6)) {
        let (gv, bv) = (gain.clone().reshaped(&[6]).unwrap(), bias.clone().reshaped(&[6]).unwrap());
        let (g1, b1) = (gv.clone(), bv.clone());
        check(&x, &r, move |g, x| {
            let (ga, bi) = (g.constant(g1.clone()), g.constant(b1.clone()));
            g.layer_norm(x, ga, bi).unwrap()
        })?;
        let xx = x.clone();
        let b2 = bv.clone();
        check(&gv, &r.clone(), move |g, ga| {
            let (xn, bi) = (g.constant(xx.clone()), g.constant(b2.clone()));
            g.layer_norm(xn, ga, bi).unwrap()
        })?;
    }

    #[test]
    fn slicing_and_concatenation(x in mat(2, 6), r in mat(2, 6), r2 in mat(4, 3)) {
        check(&x, &r, |g, x| {
            let a = g.slice_cols(x, 0, 2).unwrap();
            let b = g.slice_cols(x, 2, 6).unwrap();
            g.concat_cols(&[b, a]).unwrap()
        })?;
        check(&x, &r2, |g, x| {
            let a = g.slice_cols(x, 0, 3).unwrap();
            let b = g.slice_cols(x, 3, 6).unwrap();
            g.concat_rows(&[a, b]).unwrap()
        })?;
    }

    #[test]
    fn reductions_and_broadcast(x in mat(3, 1), r in mat(3, 4)) {
        check(&x, &r, |g, x| g.broadcast(x, &[3, 4]).unwrap())?;
        check(&x, &Tensor::scalar(1.3), |g, x| g.squared_norm(x).unwrap())?;
        check(&x, &Tensor::scalar(-0.4), |g, x| g.sum(x).unwrap())?;
    }
}
