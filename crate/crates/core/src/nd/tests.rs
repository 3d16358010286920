use super::gradcheck::{max_grad_error, weighted_sum};
use super::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

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

// ── conv1d_causal ────────────────────────────────────────────────────────

#[test]
fn conv_identity_kernel_passes_input_through() {
    let mut tape = Tape::new();
    let c = 3;
    let x = Tensor::new(vec![4, c], (0..12).map(|i| i as f32 * 0.5 - 2.0).collect());
    let mut w = Tensor::zeros(vec![1, c, c]);
    for i in 0..c {
        w.data[i * c + i] = 1.0;
    }
    let xn = tape.constant(&x);
    let wn = tape.constant(&w);
    let out = tape.conv1d_causal(xn, wn, 1);
    assert_eq!(tape.value(out), x.data.as_slice());
}

#[test]
fn conv_zero_input_gives_zero_output() {
    let mut tape = Tape::new();
    let x = Tensor::zeros(vec![5, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = randn(&mut rng, vec![3, 2, 4], 1.0);
    let xn = tape.constant(&x);
    let wn = tape.constant(&w);
    let out = tape.conv1d_causal(xn, wn, 2);
    assert!(tape.value(out).iter().all(|&v| v == 0.0));
}

#[test]
fn conv_dilated_matches_direct_convolution_sum() {
    // T=4, k=2, dilation=2, single channel, w = [0.5 (current), -2.0 (lag 2)]:
    // out[t] = 0.5*x[t] - 2*x[t-2]
    let mut tape = Tape::new();
    let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]);
    let w = Tensor::new(vec![2, 1, 1], vec![0.5, -2.0]);
    let xn = tape.constant(&x);
    let wn = tape.constant(&w);
    let out = tape.conv1d_causal(xn, wn, 2);
    assert_eq!(tape.value(out), &[0.5, 1.0, -0.5, -2.0]);
}

#[test]
fn conv_is_causal_under_perturbation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = randn(&mut rng, vec![8, 3], 1.0);
    let w = randn(&mut rng, vec![2, 3, 3], 0.7);
    let base = {
        let mut tape = Tape::new();
        let (xn, wn) = (tape.constant(&x), tape.constant(&w));
        let out = tape.conv1d_causal(xn, wn, 2);
        tape.value(out).to_vec()
    };
    for t in 0..8 {
        let mut xp = x.clone();
        xp.data[t * 3] += 1.0;
        let mut tape = Tape::new();
        let (xn, wn) = (tape.constant(&xp), tape.constant(&w));
        let out = tape.conv1d_causal(xn, wn, 2);
        let perturbed = tape.value(out);
        for (pos, (a, b)) in base.iter().zip(perturbed).enumerate() {
            if pos / 3 < t {
                assert_eq!(a, b, "position {} changed by perturbing t={t}", pos / 3);
            }
        }
    }
}

#[test]
#[should_panic(expected = "channel mismatch")]
fn conv_shape_mismatch_panics() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(vec![4, 3]));
    let w = tape.constant(&Tensor::zeros(vec![2, 2, 4]));
    tape.conv1d_causal(x, w, 1);
}

// ── cross_entropy_smoothed ───────────────────────────────────────────────

#[test]
fn cross_entropy_uniform_logits_is_ln_v() {
    let mut tape = Tape::new();
    let logits = tape.constant(&Tensor::zeros(vec![3, 2]));
    let loss = tape.cross_entropy_smoothed(logits, &[0, 1, 0], 0.0);
    assert!((tape.scalar_value(loss) - (2.0f32).ln()).abs() < 1e-6);
}

#[test]
fn cross_entropy_large_margin_vanishes() {
    let mut tape = Tape::new();
    let logits = tape.constant(&Tensor::new(vec![1, 2], vec![50.0, 0.0]));
    let loss = tape.cross_entropy_smoothed(logits, &[0], 0.0);
    assert!(tape.scalar_value(loss).abs() < 1e-6);
}

#[test]
fn cross_entropy_smoothed_scalar_oracle() {
    // V=3, logits [1,2,3], target 0, smoothing 0.1:
    // lse = 3 + ln(1 + e^-1 + e^-2); q = [0.9333.., 0.0333.., 0.0333..]
    // loss = lse - (0.9333*1 + 0.0333*2 + 0.0333*3) = 2.3076057
    let mut tape = Tape::new();
    let logits = tape.constant(&Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]));
    let loss = tape.cross_entropy_smoothed(logits, &[0], 0.1);
    assert!((tape.scalar_value(loss) - 2.307_605_7).abs() < 1e-5);
}

#[test]
#[should_panic(expected = "out of range")]
fn cross_entropy_target_out_of_range_panics() {
    let mut tape = Tape::new();
    let logits = tape.constant(&Tensor::zeros(vec![1, 4]));
    tape.cross_entropy_smoothed(logits, &[4], 0.0);
}

// ── backward ─────────────────────────────────────────────────────────────

#[test]
fn backward_of_sum_gives_ones() {
    let mut tape = Tape::new();
    let p = tape.leaf(&Tensor::new(vec![2, 3], vec![0.5; 6]));
    let ones_col = tape.constant(&Tensor::new(vec![3, 1], vec![1.0; 3]));
    let col = tape.matmul(p, ones_col);
    let ones_row = tape.constant(&Tensor::new(vec![1, 2], vec![1.0; 2]));
    let loss = tape.matmul(ones_row, col);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(p).unwrap(), &[1.0; 6]);
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let p = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0; 4]));
    let q = tape.leaf(&Tensor::new(vec![1, 1], vec![3.0]));
    let loss = tape.sum_squares(q);
    tape.backward(loss).unwrap();
    assert!(tape.grad(p).is_none());
    assert_eq!(tape.grad_or_zeros(p), vec![0.0; 4]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let p = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0; 4]));
    let doubled = tape.scale(p, 2.0);
    assert!(matches!(tape.backward(doubled), Err(NdError::Contract(_))));
}

#[test]
fn backward_random_graph_matches_finite_differences() {
    // composed graph: layernorm(conv(x @ a)) -> gelu -> weighted sum
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&mut rng, vec![5, 3], 0.8);
    let a = randn(&mut rng, vec![3, 4], 0.6);
    let w = randn(&mut rng, vec![2, 4, 4], 0.5);
    let g = Tensor::new(vec![4], vec![1.1, 0.9, 1.0, 1.2]);
    let b = Tensor::new(vec![4], vec![0.1, -0.1, 0.0, 0.2]);
    let probe = randn(&mut rng, vec![5, 4], 1.0);
    let inputs = vec![x, a, w, g, b];
    let err = max_grad_error(&inputs, &|tape, ns| {
        let h = tape.matmul(ns[0], ns[1]);
        let c = tape.conv1d_causal(h, ns[2], 2);
        let n = tape.layer_norm(c, ns[3], ns[4]);
        let act = tape.gelu(n);
        weighted_sum(tape, act, &probe)
    }, 1e-3);
    assert!(err < 1e-3, "max rel err {err}");
}

#[test]
fn forward_and_backward_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = randn(&mut rng, vec![4, 4], 1.0);
    let w = randn(&mut rng, vec![4, 4], 1.0);
    let run = || {
        let mut tape = Tape::new();
        let (xn, wn) = (tape.leaf(&x), tape.leaf(&w));
        let h = tape.matmul(xn, wn);
        let s = tape.softmax(h);
        let loss = tape.sum_squares(s);
        tape.backward(loss).unwrap();
        (tape.value(h).to_vec(), tape.grad(xn).unwrap().to_vec(), tape.grad(wn).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

// ── adam ─────────────────────────────────────────────────────────────────

#[test]
fn adam_zero_gradient_leaves_params_unchanged() {
    let mut p = Tensor::param(vec![3], vec![1.0, -2.0, 0.5]);
    let orig = p.data.clone();
    let mut state = AdamState::new(&[&p], 0.1, 0.9, 0.999, 1e-8);
    for _ in 0..5 {
        adam_step(&mut [&mut p], &[vec![0.0; 3]], &mut state);
    }
    assert_eq!(p.data, orig);
    assert_eq!(state.step_count, 5);
}

#[test]
fn adam_first_step_closed_form() {
    // step 1 from zero moments: update = -lr * g / (|g| + eps)
    let lr = 0.05;
    let eps = 1e-8;
    let g = vec![0.3f32, -1.7, 0.0];
    let mut p = Tensor::param(vec![3], vec![1.0, 1.0, 1.0]);
    let mut state = AdamState::new(&[&p], lr, 0.9, 0.999, eps);
    adam_step(&mut [&mut p], &[g.clone()], &mut state);
    for i in 0..3 {
        let want = 1.0 - lr * g[i] / (g[i].abs() + eps);
        assert!((p.data[i] - want).abs() < 1e-6, "elem {i}: {} vs {want}", p.data[i]);
    }
}

#[test]
fn adam_is_deterministic() {
    let g = vec![0.2f32, -0.4];
    let run = || {
        let mut p = Tensor::param(vec![2], vec![0.0, 0.0]);
        let mut state = AdamState::new(&[&p], 0.01, 0.9, 0.999, 1e-8);
        for _ in 0..10 {
            adam_step(&mut [&mut p], &[g.clone()], &mut state);
        }
        (p.data, state.first_moment, state.second_moment)
    };
    assert_eq!(run(), run());
}

// ── attention / softmax / misc op behavior ───────────────────────────────

#[test]
fn softmax_rows_are_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, vec![6, 9], 2.0);
    let mut tape = Tape::new();
    let xn = tape.constant(&x);
    let s = tape.softmax(xn);
    for row in tape.value(s).chunks(9) {
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn attention_is_causal_under_perturbation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = 7;
    let d = 8;
    let q = randn(&mut rng, vec![t, d], 0.9);
    let k = randn(&mut rng, vec![t, d], 0.9);
    let v = randn(&mut rng, vec![t, d], 0.9);
    let fwd = |q: &Tensor, k: &Tensor, v: &Tensor| {
        let mut tape = Tape::new();
        let (qn, kn, vn) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let out = tape.causal_attention(qn, kn, vn, 2);
        tape.value(out).to_vec()
    };
    let base = fwd(&q, &k, &v);
    for ti in 0..t {
        let mut kp = k.clone();
        let mut vp = v.clone();
        kp.data[ti * d + 1] += 0.5;
        vp.data[ti * d + 2] -= 0.5;
        let got = fwd(&q, &kp, &vp);
        for pos in 0..ti {
            assert_eq!(&base[pos * d..(pos + 1) * d], &got[pos * d..(pos + 1) * d]);
        }
    }
}

#[test]
fn clamp_gates_gradient_outside_bounds() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![1, 3], vec![-5.0, 0.2, 7.0]));
    let c = tape.clamp(x, -1.0, 1.0);
    let loss = tape.sum_squares(c);
    tape.backward(loss).unwrap();
    let g = tape.grad(x).unwrap();
    assert_eq!(g[0], 0.0);
    assert!((g[1] - 0.4).abs() < 1e-6);
    assert_eq!(g[2], 0.0);
}

#[test]
fn min_const_value_and_gradient_gate() {
    let mut tape = Tape::new();
    let below = tape.leaf(&Tensor::scalar(3.0));
    let above = tape.leaf(&Tensor::scalar(9.0));
    let mb = tape.min_const(below, 8.0);
    let ma = tape.min_const(above, 8.0);
    assert_eq!(tape.scalar_value(mb), 3.0);
    assert_eq!(tape.scalar_value(ma), 8.0);
    let sum = tape.add(mb, ma);
    tape.backward(sum).unwrap();
    assert_eq!(tape.grad(below).unwrap(), &[1.0]);
    assert_eq!(tape.grad(above).unwrap(), &[0.0]);
}

#[test]
fn nonfinite_outputs_are_flagged() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::new(vec![1, 1], vec![200.0]));
    let _ = tape.exp(x); // overflows f32
    assert_eq!(tape.first_nonfinite(), Some("exp"));
}

#[test]
fn embedding_looks_up_rows_and_scatters_grads() {
    let mut tape = Tape::new();
    let table = tape.leaf(&Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
    let e = tape.embedding(table, &[2, 0, 2]);
    assert_eq!(tape.value(e), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
    let loss = tape.sum_squares(e);
    tape.backward(loss).unwrap();
    let g = tape.grad(table).unwrap();
    // row 2 used twice: gradient 2*v each time
    assert_eq!(g, &[0.0, 2.0, 0.0, 0.0, 16.0, 20.0]);
}

#[test]
fn every_primitive_passes_a_quick_gradient_check() {
    use super::gradcheck::{primitive_grad_error, PRIMITIVES};
    for op in PRIMITIVES {
        for seed in 0..3 {
            let err = primitive_grad_error(op, seed);
            assert!(err < 1e-3, "{op} seed {seed}: rel err {err}");
        }
    }
}
