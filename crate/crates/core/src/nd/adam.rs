//! Adam with bias correction, operating on a fixed-order list of parameters.

use super::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

impl AdamState {
    /// Accumulators sized to match `params`, in the same order updates will
    /// be applied.
    pub fn new(params: &[&Tensor], lr: f32, beta1: f32, beta2: f32, eps: f32) -> Self {
        AdamState {
            step_count: 0,
            lr,
            beta1,
            beta2,
            eps,
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One Adam update over all parameters. `grads` must align with the order
/// used to build the state.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Vec<f32>], state: &mut AdamState) {
    assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
    assert_eq!(params.len(), state.first_moment.len(), "optimizer state length mismatch");
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (pi, p) in params.iter_mut().enumerate() {
        let g = &grads[pi];
        assert_eq!(g.len(), p.numel(), "gradient shape mismatch for param {pi}");
        let m = &mut state.first_moment[pi];
        let v = &mut state.second_moment[pi];
        for i in 0..g.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.data[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
}
