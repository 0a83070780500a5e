//! Finite-difference checks for every differentiable op, plus algebraic
//! properties of the forward passes.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grad_check::{grad_check, GradCheckConfig};
use super::{Graph, Parameter, Tensor, Var};
use crate::error::Result;

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn param(name: &str, shape: &[usize], seed: u64) -> Parameter {
    Parameter::new(name, uniform(shape, seed))
}

/// `sum(out * w)` with fixed pseudo-random weights, so every output entry
/// contributes a distinct amount.
fn project(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(uniform(&shape, 999));
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn check<F>(params: &[Parameter], mut f: F)
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    let cfg = GradCheckConfig::default();
    let report = grad_check(
        |g| {
            let vars: Vec<Var> = names.iter().map(|n| g.bound(n).unwrap()).collect();
            let out = f(g, &vars)?;
            if g.value(out).is_scalar() {
                Ok(out)
            } else {
                project(g, out)
            }
        },
        params,
        &cfg,
    )
    .unwrap();
    assert!(
        report.passed(),
        "max rel error {:.3e}: {:?}",
        report.max_rel_error,
        &report.failures[..report.failures.len().min(3)]
    );
    assert!(report.checked > 0);
}

#[test]
fn matmul_gradients() {
    check(&[param("a", &[3, 4], 1), param("b", &[4, 5], 2)], |g, v| {
        g.matmul(v[0], v[1])
    });
}

#[test]
fn elementwise_gradients() {
    let ps = [param("a", &[3, 4], 3), param("b", &[3, 4], 4)];
    check(&ps, |g, v| g.add(v[0], v[1]));
    check(&ps, |g, v| g.mul(v[0], v[1]));
    check(&ps, |g, v| g.scale(v[0], -1.7));
    check(&ps, |g, v| g.gelu(v[0]));
    check(&ps, |g, v| g.sum(v[1]));
}

#[test]
fn bias_gradients() {
    check(&[param("x", &[5, 3], 5), param("b", &[3], 6)], |g, v| {
        g.add_bias(v[0], v[1])
    });
}

#[test]
fn softmax_gradients_on_both_axes() {
    let ps = [param("x", &[4, 5], 7)];
    check(&ps, |g, v| g.softmax(v[0], 0));
    check(&ps, |g, v| g.softmax(v[0], 1));
}

#[test]
fn layer_norm_gradients() {
    let ps = [
        param("x", &[4, 6], 8),
        param("gain", &[6], 9),
        param("bias", &[6], 10),
    ];
    check(&ps, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
}

#[test]
fn concat_gradients() {
    let ps = [param("a", &[2, 3], 11), param("b", &[4, 3], 12), param("c", &[2, 2], 13)];
    check(&ps, |g, v| g.concat_rows(&[v[0], v[1]]));
    check(&ps, |g, v| g.concat_cols(&[v[0], v[2]]));
}

#[test]
fn embedding_gradients_with_repeated_ids() {
    check(&[param("table", &[6, 3], 14)], |g, v| {
        g.embedding(v[0], &[1, 4, 1, 0, 5, 1])
    });
}

#[test]
fn cross_entropy_gradients() {
    check(&[param("logits", &[5, 3], 15)], |g, v| {
        g.cross_entropy(v[0], &[0, 2, 1, 1, 0])
    });
}

#[test]
fn attention_gradients_with_padding() {
    let (batch, seq, d) = (2, 4, 6);
    let ps = [
        param("q", &[batch * seq, d], 16),
        param("k", &[batch * seq, d], 17),
        param("v", &[batch * seq, d], 18),
    ];
    let mask = [true, true, true, false, true, true, false, false];
    check(&ps, |g, v| g.attention(v[0], v[1], v[2], &mask, batch, seq, 2));
}

#[test]
fn gather_and_scatter_gradients() {
    let ps = [param("x", &[5, 3], 19), param("s", &[3, 1], 20), param("p", &[2, 3], 21)];
    check(&ps, |g, v| g.gather_rows(v[0], &[4, 0, 4]));
    check(&ps, |g, v| g.gather_entries(v[0], &[1, 3, 1], 2));
    check(&ps, |g, v| {
        let rows = g.gather_rows(v[0], &[0, 2, 3])?;
        g.mul_rows(rows, v[1])
    });
    check(&ps, |g, v| g.scatter_add(v[0], vec![(v[2], vec![1, 3]), (v[2], vec![3, 0])]));
}

#[test]
fn top_k_masked_softmax_gradients() {
    check(&[param("x", &[4, 5], 22)], |g, v| {
        let masked = g.top_k_mask(v[0], 2)?;
        g.softmax(masked, 1)
    });
}

#[test]
fn shared_node_gradients_sum() {
    // y = x * x + x uses x three times.
    let p = Parameter::new("x", Tensor::vector(&[0.3, -1.2, 2.0]));
    let mut g = Graph::new();
    let x = g.param(&p);
    let sq = g.mul(x, x).unwrap();
    let y = g.add(sq, x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let grad = g.grad(x).unwrap();
    for (gv, xv) in grad.iter().zip(p.value.data()) {
        assert!((gv - (2.0 * xv + 1.0)).abs() < 1e-15);
    }
}

#[test]
fn backward_twice_doubles_leaf_gradients() {
    let p = Parameter::new("x", Tensor::vector(&[0.5, -0.25]));
    let mut g = Graph::new();
    let x = g.param(&p);
    let y = g.gelu(x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let once = g.grad(x).unwrap().to_vec();
    g.backward(s).unwrap();
    let twice = g.grad(x).unwrap();
    for (a, b) in once.iter().zip(twice) {
        assert!((2.0 * a - b).abs() < 1e-15);
    }
}

#[test]
fn non_scalar_backward_is_rejected() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(&[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn matmul_small_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = g.constant(Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    let r = g.constant(Tensor::from_rows(&[&[1.0, 0.0, -1.0]]));
    let col = g.constant(Tensor::new(vec![3, 1], vec![2.0, 5.0, 1.0]).unwrap());
    let dot = g.matmul(r, col).unwrap();
    assert_eq!(g.value(dot).data(), &[1.0]);
    assert!(matches!(g.matmul(a, r), Err(crate::Error::Dimension { .. })));
}

#[test]
fn fully_masked_softmax_row_is_degenerate() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(&[f64::NEG_INFINITY, f64::NEG_INFINITY]));
    assert!(matches!(g.softmax(x, 0), Err(crate::Error::DegenerateMask)));
}

#[test]
fn padding_keys_do_not_change_attention_output() {
    let (seq, d) = (3, 4);
    let q = uniform(&[seq, d], 30);
    let k = uniform(&[seq, d], 31);
    let v = uniform(&[seq, d], 32);
    let mask = [true, true, false];
    let mut g = Graph::inference();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let base = g.attention(qv, kv, vv, &mask, 1, seq, 2).unwrap();
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for j in 0..d {
        k2.data_mut()[2 * d + j] = 100.0;
        v2.data_mut()[2 * d + j] = -50.0;
    }
    let (kv2, vv2) = (g.constant(k2), g.constant(v2));
    let other = g.attention(qv, kv2, vv2, &mask, 1, seq, 2).unwrap();
    assert_eq!(g.value(base).data(), g.value(other).data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::vector(&v));
        let s = g.softmax(x, 0).unwrap();
        let total: f64 = g.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(g.value(s).data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant(v in prop::collection::vec(-10.0f64..10.0, 1..12), c in -50.0f64..50.0) {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::vector(&v));
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let y = g.constant(Tensor::vector(&shifted));
        let (sx, sy) = (g.softmax(x, 0).unwrap(), g.softmax(y, 0).unwrap());
        for (a, b) in g.value(sx).data().iter().zip(g.value(sy).data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized(v in prop::collection::vec(-5.0f64..5.0, 8)) {
        prop_assume!(v.iter().any(|&x| (x - v[0]).abs() > 1e-3));
        let mut g = Graph::inference();
        let x = g.constant(Tensor::new(vec![1, 8], v).unwrap());
        let gain = g.constant(Tensor::filled(&[8], 1.0));
        let bias = g.constant(Tensor::zeros(&[8]));
        let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
        let out = g.value(y).data();
        let mean: f64 = out.iter().sum::<f64>() / 8.0;
        let var: f64 = out.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / 8.0;
        prop_assert!(mean.abs() < 1e-10);
        prop_assert!((var - 1.0).abs() < 1e-8);
    }
}
