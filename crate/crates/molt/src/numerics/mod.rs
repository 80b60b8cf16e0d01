//! Dense tensor computation with exact reverse-mode gradients and a
//! finite-difference verification harness.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod store;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use store::{forward_backward, forward_loss, GradMap, Param, ParamStore, Session};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_map_gradient() {
        // loss = sum(W·x) with W = identity(2), x = [1,2]
        let mut params = ParamStore::new();
        params.insert("w", t(&[2, 2], &[1., 0., 0., 1.]), true).unwrap();
        params.insert("x", t(&[1, 2], &[1., 2.]), true).unwrap();
        let (loss, grads) = forward_backward(&params, |s| {
            let w = s.param("w")?;
            let x = s.param("x")?;
            let y = s.graph.matmul(x, w)?; // row-vector convention: y = x @ w
            s.graph.sum_all(y)
        })
        .unwrap();
        assert_eq!(loss, 3.0);
        // dL/dw = x^T · ones = [[1,1],[2,2]], dL/dx = ones · w^T = [1,1]
        assert_eq!(grads["w"].data(), &[1., 1., 2., 2.]);
        assert_eq!(grads["x"].data(), &[1., 1.]);
    }

    #[test]
    fn zero_loss_zero_grads() {
        let mut params = ParamStore::new();
        params.insert("w", t(&[3], &[1., 2., 3.]), true).unwrap();
        let (loss, grads) = forward_backward(&params, |s| {
            let w = s.param("w")?;
            let sum = s.graph.sum_all(w)?;
            s.graph.mul_scalar(sum, 0.0)
        })
        .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads["w"].data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn grads_cover_exactly_trainable_names() {
        let mut params = ParamStore::new();
        params.insert("a", t(&[2], &[1., 2.]), true).unwrap();
        params.insert("frozen", t(&[2], &[5., 5.]), false).unwrap();
        params.insert("unused", t(&[2], &[0., 0.]), true).unwrap();
        let (_, grads) = forward_backward(&params, |s| {
            let a = s.param("a")?;
            let f = s.param("frozen")?;
            let y = s.graph.mul(a, f)?;
            s.graph.sum_all(y)
        })
        .unwrap();
        assert_eq!(grads.keys().collect::<Vec<_>>(), vec!["a", "unused"]);
        assert_eq!(grads["a"].data(), &[5., 5.]);
        assert!(grads["unused"].data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn quadratic_grad_check() {
        // loss = 0.5 * ||p||^2, p = [3,4] -> grad = [3,4]
        let mut params = ParamStore::new();
        params.insert("p", t(&[2], &[3., 4.]), true).unwrap();
        let (_, grads) = forward_backward(&params, |s| {
            let p = s.param("p")?;
            let sq = s.graph.mul(p, p)?;
            let sum = s.graph.sum_all(sq)?;
            s.graph.mul_scalar(sum, 0.5)
        })
        .unwrap();
        assert_eq!(grads["p"].data(), &[3., 4.]);
        let report = grad_check(&params, 1e-5, |s| {
            let p = s.param("p")?;
            let sq = s.graph.mul(p, p)?;
            let sum = s.graph.sum_all(sq)?;
            s.graph.mul_scalar(sum, 0.5)
        })
        .unwrap();
        assert!(report.max_error() < 1e-8, "max err {}", report.max_error());
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let mut params = ParamStore::new();
        params.insert("p", t(&[1], &[1.0]), true).unwrap();
        assert!(grad_check(&params, 0.0, |s| s.param("p")).is_err());
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        // A deliberately wrong backward: scale the analytic gradient by 2 by
        // doubling the loss in backward-land only. We emulate the fixture by
        // comparing FD of loss against analytic of 2*loss.
        let mut params = ParamStore::new();
        params.insert("p", t(&[2], &[1.5, -2.0]), true).unwrap();
        let (_, doubled) = forward_backward(&params, |s| {
            let p = s.param("p")?;
            let sq = s.graph.mul(p, p)?;
            s.graph.sum_all(sq)
        })
        .unwrap();
        // FD of 0.5*loss vs analytic of loss -> relative error ~= 0.5
        let p = &params.get("p").unwrap().tensor;
        let eps = 1e-6;
        for i in 0..2 {
            let a = doubled["p"].data()[i];
            let f = |v: f64| {
                let mut ps = params.clone();
                ps.get_mut("p").unwrap().tensor.data_mut()[i] = v;
                forward_loss(&ps, |s| {
                    let p = s.param("p")?;
                    let sq = s.graph.mul(p, p)?;
                    let sum = s.graph.sum_all(sq)?;
                    s.graph.mul_scalar(sum, 0.5)
                })
                .unwrap()
            };
            let numeric = (f(p.data()[i] + eps) - f(p.data()[i] - eps)) / (2.0 * eps);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!((err - 0.5).abs() < 1e-3, "expected ~0.5 rel error, got {err}");
        }
    }

    #[test]
    fn mlp_matches_finite_differences() {
        // 2-layer MLP with tanh, random input, all ops in the loss path.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut rnd = |shape: &[usize]| {
            Tensor::from_fn(shape, |_| rng.gen_range(-0.8..0.8))
        };
        let mut params = ParamStore::new();
        params.insert("w1", rnd(&[3, 5]), true).unwrap();
        params.insert("b1", rnd(&[5]), true).unwrap();
        params.insert("w2", rnd(&[5, 2]), true).unwrap();
        params.insert("b2", rnd(&[2]), true).unwrap();
        let x = rnd(&[4, 3]);
        let target = rnd(&[4, 2]);

        let build = move |s: &mut Session<f64>| {
            let w1 = s.param("w1")?;
            let b1 = s.param("b1")?;
            let w2 = s.param("w2")?;
            let b2 = s.param("b2")?;
            let xn = s.input(x.clone(), "x")?;
            let tn = s.input(target.clone(), "target")?;
            let h = s.graph.matmul(xn, w1)?;
            let h = s.graph.add(h, b1)?;
            let h = s.graph.tanh(h)?;
            let y = s.graph.matmul(h, w2)?;
            let y = s.graph.add(y, b2)?;
            let d = s.graph.sub(y, tn)?;
            let sq = s.graph.mul(d, d)?;
            s.graph.sum_all(sq)
        };
        let report = grad_check(&params, 1e-5, build).unwrap();
        assert!(report.max_error() < 1e-4, "max err {}", report.max_error());
    }

    #[test]
    fn forward_backward_is_deterministic() {
        let mut params = ParamStore::new();
        params.insert("w", t(&[4, 4], &(0..16).map(|i| (i as f64) * 0.17 - 1.0).collect::<Vec<_>>()), true).unwrap();
        let build = |s: &mut Session<f64>| {
            let w = s.param("w")?;
            let h = s.graph.tanh(w)?;
            let y = s.graph.matmul(h, w)?;
            let sq = s.graph.mul(y, y)?;
            s.graph.sum_all(sq)
        };
        let (l1, g1) = forward_backward(&params, build).unwrap();
        let (l2, g2) = forward_backward(&params, build).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (k, v) in &g1 {
            let bits1: Vec<u64> = v.data().iter().map(|x| x.to_bits()).collect();
            let bits2: Vec<u64> = g2[k].data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
    }

    #[test]
    fn nan_in_forward_names_the_node() {
        let mut params = ParamStore::new();
        params.insert("p", t(&[1], &[-1.0]), true).unwrap();
        let err = forward_loss(&params, |s| {
            let p = s.param("p")?;
            let r = s.graph.sqrt(p)?; // sqrt(-1) = NaN
            s.graph.sum_all(r)
        })
        .unwrap_err();
        match err {
            crate::error::MoltError::NonFinite { node, .. } => {
                assert!(node.contains("node#"), "node path missing: {node}")
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn fused_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rnd = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
        let mut params = ParamStore::new();
        params.insert("x", rnd(&[3, 6]), true).unwrap();
        params.insert("gamma", rnd(&[6]), true).unwrap();
        params.insert("beta", rnd(&[6]), true).unwrap();
        let mask: Vec<bool> = (0..18).map(|i| i % 5 != 0).collect();
        let ids = vec![2usize, 0, 4];

        let build = move |s: &mut Session<f64>| {
            let x = s.param("x")?;
            let gamma = s.param("gamma")?;
            let beta = s.param("beta")?;
            let ln = s.graph.layer_norm(x, gamma, beta, 1e-5)?;
            let sm = s.graph.masked_softmax(ln, mask.clone())?;
            let lsm = s.graph.log_softmax(sm)?;
            let picked = s.graph.gather_last(lsm, &ids)?;
            let sl = s.graph.silu(picked)?;
            s.graph.sum_all(sl)
        };
        let report = grad_check(&params, 1e-6, build).unwrap();
        assert!(report.max_error() < 1e-4, "max err {}", report.max_error());
    }

    #[test]
    fn gather_and_concat_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut rnd = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
        let mut params = ParamStore::new();
        params.insert("table", rnd(&[5, 3]), true).unwrap();
        params.insert("w", rnd(&[3, 3]), true).unwrap();

        let build = |s: &mut Session<f64>| {
            let table = s.param("table")?;
            let w = s.param("w")?;
            // repeated rows exercise scatter-add accumulation
            let g1 = s.graph.gather_rows(table, &[0, 2, 2, 4], &[4])?;
            let g2 = s.graph.gather_rows(table, &[1, 1], &[2])?;
            let cat = s.graph.concat_rows(g1, g2)?;
            let y = s.graph.matmul(cat, w)?;
            let sq = s.graph.mul(y, y)?;
            let ssum = s.graph.sum_axis(sq, 1)?;
            let r = s.graph.reshape(ssum, vec![6, 1])?;
            let denom = s.graph.add_scalar(r, 1.0)?;
            let frac = s.graph.div(sq, denom)?;
            s.graph.sum_all(frac)
        };
        let report = grad_check(&params, 1e-6, build).unwrap();
        assert!(report.max_error() < 1e-4, "max err {}", report.max_error());
    }
}
