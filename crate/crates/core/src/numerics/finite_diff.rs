//! Central finite differences, the reference every analytic gradient in the
//! crate is checked against.

use rand::Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Step used by all gradient checks.
pub const STEP: f64 = 1e-4;

/// Entries drawn uniformly from `[-2, 2]`.
pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Elementwise relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| rel_error(*a, *b))
        .fold(0.0, f64::max)
}

/// Gradient of `f` at `x` by central differences with step `h`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Checks one graph operation: the scalar objective is `sum(w * op(inputs))`
/// for a random weight tensor `w`. Returns the max relative error over every
/// input element.
pub fn check_op<R: Rng>(
    inputs: &[Tensor],
    rng: &mut R,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> f64 {
    let store = ParamStore::new();
    let forward = |ins: &[Tensor]| -> Tensor {
        let mut g = Graph::inference(&store);
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).expect("forward");
        g.value(out).clone()
    };
    let out_shape = forward(inputs).shape().to_vec();
    let weights = random_tensor(&out_shape, rng);

    let mut g = Graph::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars).expect("forward");
    let grads = g.backward(out, weights.clone()).expect("backward");

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let numeric = central_diff(
            |x| {
                let mut ins = inputs.to_vec();
                ins[k] = Tensor::new(input.shape(), x.to_vec()).unwrap();
                let y = forward(&ins);
                y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
            },
            input.data(),
            STEP,
        );
        worst = worst.max(max_rel_error(analytic.data(), &numeric));
    }
    worst
}
