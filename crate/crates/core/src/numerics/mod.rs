//! Dense `f64` tensors and a reverse-mode tape.
//!
//! Every differentiable operation on [`Graph`] is held to the same contract:
//! on random inputs in `[-2, 2]` its analytic gradient agrees with central
//! finite differences (`h = 1e-4`) to a max relative error below `1e-4`.
//! [`finite_diff`] carries the checker used by the test suites.

pub mod finite_diff;
mod graph;
pub(crate) mod kernels;
mod param;
mod tensor;

pub use graph::{AttnMask, Grads, Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// `log(sum(exp(xs)))`, returning `-inf` for an empty or all `-inf` slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::finite_diff::{check_op, random_tensor};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CONTRACT: f64 = 1e-4;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let i = g.constant(Tensor::identity(2));
        let mv = g.constant(m.clone());
        let out = g.matmul(i, mv).unwrap();
        assert_eq!(g.value(out), &m);

        let a = g.constant(Tensor::new(&[1, 1], vec![2.0]).unwrap());
        let b = g.constant(Tensor::new(&[1, 1], vec![3.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn matmul_gradient_tight() {
        let mut r = rng();
        let inputs = vec![random_tensor(&[3, 4], &mut r), random_tensor(&[4, 2], &mut r)];
        let err = check_op(&inputs, &mut r, |g, v| g.matmul(v[0], v[1]));
        assert!(err < 1e-6, "matmul rel err {err}");
    }

    #[test]
    fn log_softmax_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::new(&[3], vec![0.0; 3]).unwrap());
        let y = g.log_softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v + 3f64.ln()).abs() < 1e-15);
        }
        let x = g.constant(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
        let y = g.log_softmax(x, 0).unwrap();
        assert!(g.value(y).is_finite());
        assert!(g.value(y).data()[0].abs() < 1e-12);

        let mut r = rng();
        let t = random_tensor(&[7], &mut r);
        let x = g.constant(t);
        let y = g.log_softmax(x, 0).unwrap();
        let s: f64 = g.value(y).data().iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_over_axis_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let mut r = rng();
        let x = g.constant(random_tensor(&[3, 4], &mut r));
        let y = g.log_softmax(x, 0).unwrap();
        let t = g.value(y);
        for j in 0..4 {
            let s: f64 = (0..3).map(|i| t.get2(i, j).exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(g.log_softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut store = ParamStore::new();
        let gamma = store.add("g", Tensor::full(&[4], 1.0));
        let beta = store.add("b", Tensor::zeros(&[4]));
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::full(&[2, 4], 3.25));
        let (gv, bv) = (g.param(gamma), g.param(beta));
        let y = g.layer_norm(x, gv, bv).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut r = rng();
        let x = random_tensor(&[6, 3], &mut r);
        // kernel 3, centre tap = identity.
        let mut w = Tensor::zeros(&[9, 3]);
        for c in 0..3 {
            w.data_mut()[(3 + c) * 3 + c] = 1.0;
        }
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let wv = g.constant(w);
        let y = g.conv1d(xv, wv, None, 3, 1, 1).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn attention_single_position_returns_value() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let mut r = rng();
        let q = g.constant(random_tensor(&[3, 4], &mut r));
        let k = g.constant(random_tensor(&[1, 4], &mut r));
        let vt = random_tensor(&[1, 4], &mut r);
        let v = g.constant(vt.clone());
        let out = g.attention(q, k, v, 2, &AttnMask::None).unwrap();
        for i in 0..3 {
            for (a, b) in g.value(out).row(i).iter().zip(vt.data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn causal_attention_first_row_sees_only_itself() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let mut r = rng();
        let q = g.constant(random_tensor(&[3, 4], &mut r));
        let k = g.constant(random_tensor(&[3, 4], &mut r));
        let vt = random_tensor(&[3, 4], &mut r);
        let v = g.constant(vt.clone());
        let out = g.attention(q, k, v, 1, &AttnMask::Causal).unwrap();
        for (a, b) in g.value(out).row(0).iter().zip(vt.row(0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn elementwise_gradients_pass_contract() {
        let mut r = rng();
        type Build = fn(&mut Graph, &[Var]) -> crate::error::Result<Var>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            ("add", vec![vec![3, 4], vec![3, 4]], |g, v| g.add(v[0], v[1])),
            ("mul", vec![vec![3, 4], vec![3, 4]], |g, v| g.mul(v[0], v[1])),
            ("add_row", vec![vec![3, 4], vec![4]], |g, v| g.add_row(v[0], v[1])),
            ("scale", vec![vec![2, 5]], |g, v| Ok(g.scale(v[0], -1.7))),
            ("relu", vec![vec![4, 5]], |g, v| Ok(g.relu(v[0]))),
            ("gelu", vec![vec![4, 5]], |g, v| Ok(g.gelu(v[0]))),
            ("sigmoid", vec![vec![4, 5]], |g, v| Ok(g.sigmoid(v[0]))),
            ("sum_all", vec![vec![3, 3]], |g, v| Ok(g.sum_all(v[0]))),
            ("log_softmax", vec![vec![3, 5]], |g, v| g.log_softmax(v[0], 1)),
            ("log_softmax_ax0", vec![vec![3, 5]], |g, v| g.log_softmax(v[0], 0)),
            ("linear", vec![vec![3, 4], vec![4, 5], vec![5]], |g, v| {
                g.linear(v[0], v[1], Some(v[2]))
            }),
            ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |g, v| {
                g.layer_norm(v[0], v[1], v[2])
            }),
            ("conv1d", vec![vec![9, 3], vec![12, 2], vec![2]], |g, v| {
                g.conv1d(v[0], v[1], Some(v[2]), 4, 2, 1)
            }),
            ("depthwise_conv1d", vec![vec![6, 3], vec![3, 3], vec![3]], |g, v| {
                g.depthwise_conv1d(v[0], v[1], v[2])
            }),
            ("embedding", vec![vec![5, 3]], |g, v| g.embedding(v[0], &[4, 0, 4, 2])),
            ("gather_rows", vec![vec![3, 4]], |g, v| g.gather_rows(v[0], &[0, 0, 1, 2, 2, 2])),
            ("replace_rows", vec![vec![5, 3], vec![2, 3]], |g, v| {
                g.replace_rows(v[0], v[1], &[3, 1])
            }),
            ("slice_cols", vec![vec![3, 6]], |g, v| g.slice_cols(v[0], 2, 5)),
            ("attention", vec![vec![3, 4], vec![5, 4], vec![5, 4]], |g, v| {
                g.attention(v[0], v[1], v[2], 2, &AttnMask::None)
            }),
            ("attention_causal", vec![vec![4, 6], vec![4, 6], vec![4, 6]], |g, v| {
                g.attention(v[0], v[1], v[2], 3, &AttnMask::Causal)
            }),
        ];
        for (name, shapes, build) in cases {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, &mut r)).collect();
            let err = check_op(&inputs, &mut r, build);
            assert!(err < CONTRACT, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn inference_graph_records_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[2, 2], 0.5));
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::full(&[1, 2], 1.0));
        let wv = g.param(w);
        let y = g.matmul(x, wv).unwrap();
        let grads = g.backward(y, Tensor::full(&[1, 2], 1.0)).unwrap();
        assert!(grads.params().is_empty());
        assert!(grads.wrt(x).is_none());
    }

    #[test]
    fn parameter_gradients_accumulate_across_uses() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[1], 2.0));
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y, Tensor::scalar(1.0)).unwrap();
        store.accumulate(grads.params());
        assert_eq!(store.get(w).grad.data(), &[4.0]);
        store.zero_grad();
        assert_eq!(store.get(w).grad.data(), &[0.0]);
    }

    proptest::proptest! {
        #[test]
        fn forward_stays_finite_on_bounded_inputs(
            data in proptest::collection::vec(-10.0f64..10.0, 24)
        ) {
            let mut store = ParamStore::new();
            let gamma = store.add("g", Tensor::full(&[6], 1.0));
            let beta = store.add("b", Tensor::zeros(&[6]));
            let mut g = Graph::new(&store);
            let x = g.input(Tensor::new(&[4, 6], data).unwrap());
            let (gv, bv) = (g.param(gamma), g.param(beta));
            let n = g.layer_norm(x, gv, bv).unwrap();
            let a = g.attention(n, x, x, 3, &AttnMask::Causal).unwrap();
            let s = g.gelu(a);
            let y = g.log_softmax(s, 1).unwrap();
            proptest::prop_assert!(g.value(y).is_finite());
            let grads = g.backward(y, Tensor::full(&[4, 6], 1.0)).unwrap();
            proptest::prop_assert!(grads.wrt(x).unwrap().is_finite());
        }
    }
}
