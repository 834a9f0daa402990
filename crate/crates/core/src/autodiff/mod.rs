//! Dense tensors with a reverse-mode tape.
//!
//! Values are 64-bit floats throughout. Broadcasting is limited to
//! scalar-times-tensor ([`Graph::scale`]); everything else uses explicit
//! reshape, tile, slice and concat nodes.

mod graph;
pub mod gradcheck;
mod tensor;

pub use graph::{gelu, sigmoid, BinaryOp, Graph, UnaryOp, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
#[cfg(test)]
pub(crate) use tensor::gemm;

#[cfg(test)]
mod tests {
    use super::gradcheck::check;
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(Tensor::matrix(2, 2, vec![3., -1., 0.5, 7.]).unwrap());
        let out = g.matmul(i, m).unwrap();
        assert_eq!(g.value(out), g.value(m));

        let a = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![5., 6.]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17., 39.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let a = randn(&[3, 4], seed);
            let b = randn(&[4, 2], seed + 100);
            let r = check(&[a, b], EPS, |g, v| {
                let c = g.matmul(v[0], v[1])?;
                Ok(g.sum(c))
            })
            .unwrap();
            assert!(r.passes(TOL), "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn matmul_nt_gradient() {
        let a = randn(&[3, 4], 1);
        let b = randn(&[5, 4], 2);
        let w = randn(&[3, 5], 3);
        let r = check(&[a, b, w], EPS, |g, v| {
            let c = g.matmul_nt(v[0], v[1])?;
            let p = g.mul(c, v[2])?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(r.passes(TOL), "{r:?}");
    }

    #[test]
    fn pointwise_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(gelu(0.0), 0.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-2.0, 0.0, 3.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(g.add(a, b), Err(crate::Error::Dimension { .. })));
        // scalar ⊗ tensor is the one allowed broadcast
        let s = g.constant(Tensor::scalar(2.0));
        let ones = g.constant(Tensor::ones(&[2, 2]));
        let m = g.mul(s, ones).unwrap();
        assert_eq!(g.value(m).data(), &[2.0; 4]);
    }

    #[test]
    fn elementwise_gradients() {
        for seed in 0..5 {
            let a = randn(&[3, 3], seed);
            let b = randn(&[3, 3], seed + 50);
            let w = randn(&[3, 3], seed + 99);
            let r = check(&[a, b, w], EPS, |g, v| {
                let m = g.mul(v[0], v[1])?;
                let s = g.sigmoid(m);
                let ge = g.gelu(v[0]);
                let d = g.sub(s, ge)?;
                let e = g.add(d, v[1])?;
                let p = g.mul(e, v[2])?;
                Ok(g.sum(p))
            })
            .unwrap();
            assert!(r.passes(TOL), "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let x = Tensor::vector(vec![-1.3, 0.7, 2.2, -0.4]);
        let r = check(&[x], EPS, |g, v| {
            let y = g.relu(v[0]);
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        })
        .unwrap();
        assert!(r.passes(TOL));
    }

    #[test]
    fn scale_gradient_reaches_scalar() {
        for seed in 0..5 {
            let s = Tensor::scalar(0.7 + seed as f64 * 0.1);
            let t = randn(&[2, 3], seed);
            let w = randn(&[2, 3], seed + 7);
            let r = check(&[s, t, w], EPS, |g, v| {
                let st = g.scale(v[0], v[1])?;
                let p = g.mul(st, v[2])?;
                let q = g.mul(p, p)?;
                Ok(g.sum(q))
            })
            .unwrap();
            assert!(r.passes(TOL), "{r:?}");
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![4.0, 4.0, 4.0, 0.0, 3f64.ln(), 1e3]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        for j in 0..3 {
            assert!((v.at(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![0.0, 3f64.ln()]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        assert!((g.value(y).at(0, 0) - 0.25).abs() < 1e-12);
        assert!((g.value(y).at(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, f64::NAN]).reshape(&[1, 2]).unwrap());
        assert!(matches!(g.softmax_rows(x), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn softmax_gradient() {
        for seed in 0..5 {
            let x = randn(&[3, 4], seed);
            let w = randn(&[3, 4], seed + 1);
            let r = check(&[x, w], EPS, |g, v| {
                let y = g.softmax_rows(v[0])?;
                let p = g.mul(y, v[1])?;
                Ok(g.sum(p))
            })
            .unwrap();
            assert!(r.passes(TOL), "{r:?}");
        }
    }

    #[test]
    fn layer_norm_values() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::ones(&[2]));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap());
        let y = g.layer_norm(x, gain, bias).unwrap();
        // variance 1, so the output is ±1/sqrt(1 + eps)
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((g.value(y).at(0, 0) + expect).abs() < 1e-12);
        assert!((g.value(y).at(0, 1) - expect).abs() < 1e-12);
        assert!((g.value(y).at(0, 1) - 1.0).abs() < 1e-3);

        let gain = g.constant(Tensor::ones(&[3]));
        let bias = g.constant(Tensor::zeros(&[3]));
        let c = g.constant(Tensor::full(&[2, 3], 5.0));
        let y = g.layer_norm(c, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let bad = g.constant(Tensor::zeros(&[2, 4]));
        assert!(g.layer_norm(bad, gain, bias).is_err());
    }

    #[test]
    fn layer_norm_gradient() {
        for seed in 0..5 {
            let x = randn(&[3, 5], seed);
            let gain = randn(&[5], seed + 11);
            let bias = randn(&[5], seed + 12);
            let w = randn(&[3, 5], seed + 13);
            let r = check(&[x, gain, bias, w], EPS, |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2])?;
                let p = g.mul(y, v[3])?;
                Ok(g.sum(p))
            })
            .unwrap();
            assert!(r.passes(TOL), "{r:?}");
        }
    }

    #[test]
    fn structural_ops_gradient() {
        let x = randn(&[4, 6], 3);
        let v = randn(&[6], 4);
        let w = randn(&[2, 12], 5);
        let mix = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let r = check(&[x, v, w], EPS, |g, vars| {
            let a = g.slice(vars[0], (0, 4), (0, 3))?;
            let b = g.slice(vars[0], (0, 4), (3, 6))?;
            let c = g.concat_cols(&[b, a])?;
            let t = g.tile_rows(vars[1], 4)?;
            let s = g.add(c, t)?;
            let top = g.slice(s, (0, 2), (0, 6))?;
            let bottom = g.slice(s, (2, 4), (0, 6))?;
            let rows = g.concat_rows(&[bottom, top])?;
            let pooled = g.row_mix(rows, &mix)?;
            let tr = g.transpose(pooled)?;
            let flat = g.reshape(tr, &[2, 6])?;
            let flat = g.reshape(flat, &[1, 12])?;
            let flat2 = g.concat_rows(&[flat, flat])?;
            let p = g.mul(flat2, vars[2])?;
            let q = g.scale_const(p, 0.3);
            let q2 = g.mul(q, q)?;
            Ok(g.mean(q2))
        })
        .unwrap();
        assert!(r.passes(TOL), "{r:?}");
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn backward_contract_and_state_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(crate::Error::State(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = g.param(Tensor::vector(vec![3.0, 4.0]));
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn deterministic_forward_and_backward() {
        let run = || {
            let a = randn(&[4, 4], 9);
            let mut g = Graph::new();
            let x = g.param(a);
            let y = g.softmax_rows(x).unwrap();
            let z = g.matmul(y, x).unwrap();
            let s = g.sum(z);
            g.backward(s).unwrap();
            (g.value(z).clone(), g.grad(x).unwrap().clone())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert!(v1.bit_eq(&v2));
        assert!(g1.bit_eq(&g2));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-300.0f64..300.0, 12)) {
                let mut g = Graph::new();
                let x = g.constant(Tensor::matrix(3, 4, vals).unwrap());
                let y = g.softmax_rows(x).unwrap();
                for r in 0..3 {
                    let s: f64 = g.value(y).row(r).iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
