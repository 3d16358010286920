//! Central finite-difference gradient checking, used by the unit tests and
//! the acceptance suite. The check perturbs every input element and compares
//! the two-sided difference quotient against the tape gradient.

use super::{Node, Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Builds a scalar loss from leaf nodes; called once per perturbed forward.
pub type LossBuilder<'a> = dyn Fn(&mut Tape, &[Node]) -> Node + 'a;

/// Maximum guarded relative error between analytic and finite-difference
/// gradients over all elements of all inputs. The difference quotients come
/// from the tape's `f64` replay so they are not limited by `f32` rounding.
pub fn max_grad_error(inputs: &[Tensor], build: &LossBuilder, eps: f32) -> f64 {
    let mut tape = Tape::new();
    let nodes: Vec<Node> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &nodes);
    tape.backward(loss).expect("scalar loss");
    let grads: Vec<Vec<f32>> = nodes.iter().map(|&n| tape.grad_or_zeros(n)).collect();
    let eps = eps as f64;

    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let base: Vec<f64> = inputs[i].data.iter().map(|&v| v as f64).collect();
        for j in 0..inputs[i].numel() {
            let mut v = base.clone();
            v[j] = base[j] + eps;
            let fp = tape.eval_f64_with(loss, &[(nodes[i], v.clone())]);
            v[j] = base[j] - eps;
            let fm = tape.eval_f64_with(loss, &[(nodes[i], v)]);
            let fd = (fp - fm) / (2.0 * eps);
            let a = grads[i][j] as f64;
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-2);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

/// Collapse a (possibly non-scalar) 2-d node to a scalar through fixed
/// probe weights, so any op can be gradient-checked.
pub fn weighted_sum(tape: &mut Tape, x: Node, probe: &Tensor) -> Node {
    let w = tape.constant(probe);
    let prod = tape.mul(x, w);
    let (t, c) = (tape.shape(prod)[0], tape.shape(prod)[1]);
    let ones_col = tape.constant(&Tensor::new(vec![c, 1], vec![1.0; c]));
    let col = tape.matmul(prod, ones_col);
    let ones_row = tape.constant(&Tensor::new(vec![1, t], vec![1.0; t]));
    tape.matmul(ones_row, col)
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.sample(rand_distr::StandardNormal);
            v as f32 * scale
        })
        .collect();
    Tensor::new(shape, data)
}

/// The differentiable primitive set, for exhaustive gradient sweeps.
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "add",
    "add_row",
    "mul",
    "conv1d_causal",
    "embedding",
    "layer_norm",
    "gelu",
    "softmax",
    "causal_attention",
    "cross_entropy_smoothed",
    "exp",
    "slice_rows",
    "sum_squares",
];

/// Gradient-check one primitive on a random instance derived from `seed`;
/// returns the worst guarded relative error.
pub fn primitive_grad_error(op: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-3;
    match op {
        "matmul" => {
            let a = randn(&mut rng, vec![3, 4], 0.8);
            let b = randn(&mut rng, vec![4, 2], 0.8);
            let probe = randn(&mut rng, vec![3, 2], 1.0);
            max_grad_error(&[a, b], &|t, ns| {
                let m = t.matmul(ns[0], ns[1]);
                weighted_sum(t, m, &probe)
            }, eps)
        }
        "add" => {
            let a = randn(&mut rng, vec![3, 3], 1.0);
            let b = randn(&mut rng, vec![3, 3], 1.0);
            let probe = randn(&mut rng, vec![3, 3], 1.0);
            max_grad_error(&[a, b], &|t, ns| {
                let m = t.add(ns[0], ns[1]);
                weighted_sum(t, m, &probe)
            }, eps)
        }
        "add_row" => {
            let a = randn(&mut rng, vec![4, 3], 1.0);
            let b = randn(&mut rng, vec![3], 1.0);
            let probe = randn(&mut rng, vec![4, 3], 1.0);
            max_grad_error(&[a, b], &|t, ns| {
                let m = t.add_row(ns[0], ns[1]);
                weighted_sum(t, m, &probe)
            }, eps)
        }
        "mul" => {
            let a = randn(&mut rng, vec![3, 3], 1.0);
            let b = randn(&mut rng, vec![3, 3], 1.0);
            let probe = randn(&mut rng, vec![3, 3], 1.0);
            max_grad_error(&[a, b], &|t, ns| {
                let m = t.mul(ns[0], ns[1]);
                weighted_sum(t, m, &probe)
            }, eps)
        }
        "conv1d_causal" => {
            let x = randn(&mut rng, vec![6, 2], 0.8);
            let w = randn(&mut rng, vec![3, 2, 3], 0.6);
            let probe = randn(&mut rng, vec![6, 3], 1.0);
            let dil = 1 + (seed % 3) as usize;
            max_grad_error(&[x, w], &move |t, ns| {
                let m = t.conv1d_causal(ns[0], ns[1], dil);
                weighted_sum(t, m, &probe)
            }, eps)
        }
        "embedding" => {
            let table = randn(&mut rng, vec![5, 3], 0.9);
            let probe = randn(&mut rng, vec![4, 3], 1.0);
            max_grad_error(&[table], &|t, ns| {
                let e = t.embedding(ns[0], &[1, 4, 1, 0]);
                weighted_sum(t, e, &probe)
            }, eps)
        }
        "layer_norm" => {
            let x = randn(&mut rng, vec![4, 5], 1.0);
            let g = randn(&mut rng, vec![5], 0.3);
            let b = randn(&mut rng, vec![5], 0.3);
            let probe = randn(&mut rng, vec![4, 5], 1.0);
            max_grad_error(&[x, g, b], &|t, ns| {
                let m = t.layer_norm(ns[0], ns[1], ns[2]);
                weighted_sum(t, m, &probe)
            }, eps)
        }
        "gelu" => {
            let x = randn(&mut rng, vec![4, 4], 1.2);
            let probe = randn(&mut rng, vec![4, 4], 1.0);
            max_grad_error(&[x], &|t, ns| {
                let m = t.gelu(ns[0]);
                weighted_sum(t, m, &probe)
            }, eps)
        }
        "softmax" => {
            let x = randn(&mut rng, vec![3, 5], 1.5);
            let probe = randn(&mut rng, vec![3, 5], 1.0);
            max_grad_error(&[x], &|t, ns| {
                let m = t.softmax(ns[0]);
                weighted_sum(t, m, &probe)
            }, eps)
        }
        "causal_attention" => {
            let q = randn(&mut rng, vec![5, 4], 0.8);
            let k = randn(&mut rng, vec![5, 4], 0.8);
            let v = randn(&mut rng, vec![5, 4], 0.8);
            let probe = randn(&mut rng, vec![5, 4], 1.0);
            max_grad_error(&[q, k, v], &|t, ns| {
                let m = t.causal_attention(ns[0], ns[1], ns[2], 2);
                weighted_sum(t, m, &probe)
            }, eps)
        }
        "cross_entropy_smoothed" => {
            let logits = randn(&mut rng, vec![4, 5], 1.0);
            let targets: Vec<u32> = (0..4).map(|_| rng.random_range(0..5)).collect();
            let smoothing = if seed % 2 == 0 { 0.0 } else { 0.1 };
            max_grad_error(&[logits], &move |t, ns| {
                t.cross_entropy_smoothed(ns[0], &targets, smoothing)
            }, eps)
        }
        "exp" => {
            let x = randn(&mut rng, vec![3, 3], 0.5);
            let probe = randn(&mut rng, vec![3, 3], 1.0);
            max_grad_error(&[x], &|t, ns| {
                let m = t.exp(ns[0]);
                weighted_sum(t, m, &probe)
            }, eps)
        }
        "slice_rows" => {
            let x = randn(&mut rng, vec![6, 3], 1.0);
            let probe = randn(&mut rng, vec![4, 3], 1.0);
            max_grad_error(&[x], &|t, ns| {
                let s = t.slice_rows(ns[0], 1, 4);
                weighted_sum(t, s, &probe)
            }, eps)
        }
        "sum_squares" => {
            let x = randn(&mut rng, vec![3, 4], 1.0);
            max_grad_error(&[x], &|t, ns| t.sum_squares(ns[0]), eps)
        }
        other => panic!("unknown primitive {other}"),
    }
}
