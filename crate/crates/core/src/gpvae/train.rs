//! Training loop shared by both latent modes: Adam updates on the ELBO loss,
//! beta-controller feedback, and periodic validation rows.

use super::{ElboBreakdown, GpVaeModel, LatentMode, ModelError};
use crate::data::{blocks_of, Split, TokenBlock};
use crate::nd::{adam_step, AdamState, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Val,
}

/// One log row, shaped like the training-table columns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: u64,
    pub phase: Phase,
    #[serde(flatten)]
    pub breakdown: ElboBreakdown,
    pub beta: f32,
}

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub mode: LatentMode,
    pub lr: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    /// Validation cadence in steps (0 disables intermediate validation).
    pub val_every: u64,
    /// Blocks averaged per validation pass.
    pub val_blocks: usize,
}

impl TrainOpts {
    pub fn desk(mode: LatentMode) -> Self {
        TrainOpts {
            mode,
            lr: 3e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            val_every: 100,
            val_blocks: 4,
        }
    }
}

/// Mutable training state kept across checkpoint save/load so a resumed run
/// continues bit-for-bit.
pub struct TrainerState {
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl TrainerState {
    pub fn fresh(model: &GpVaeModel, opts: &TrainOpts, seed: u64) -> Self {
        let named = model.weights.named();
        let params: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
        TrainerState {
            adam: AdamState::new(&params, opts.lr, opts.adam_beta1, opts.adam_beta2, opts.adam_eps),
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        }
    }
}

/// Run `n_steps` Adam updates, drawing one training block per step, and
/// return the per-step rows plus interleaved validation rows (one final
/// validation row always). A numeric failure aborts with the step preserved
/// in `state.step` so the caller can checkpoint.
pub fn train(
    model: &mut GpVaeModel,
    blocks: &[TokenBlock],
    opts: &TrainOpts,
    state: &mut TrainerState,
    n_steps: u64,
) -> Result<Vec<TrainRow>, ModelError> {
    let train_blocks = blocks_of(blocks, Split::Train);
    if train_blocks.is_empty() {
        return Err(ModelError::Contract("no training blocks".into()));
    }
    let val_blocks = blocks_of(blocks, Split::Val);
    let mut rows = Vec::new();
    for _ in 0..n_steps {
        let pick = state.rng.random_range(0..train_blocks.len());
        let x = &train_blocks[pick].tokens;
        let (breakdown, mut tape, loss, param_nodes) = model.elbo(x, opts.mode, &mut state.rng)?;
        tape.backward(loss)
            .map_err(|e| ModelError::Contract(format!("backward failed: {e}")))?;
        let grads: Vec<Vec<f32>> = param_nodes.iter().map(|&n| tape.grad_or_zeros(n)).collect();
        drop(tape);
        {
            let mut named = model.weights.named_mut();
            let mut params: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
            adam_step(&mut params, &grads, &mut state.adam);
        }
        model.beta_update(breakdown.kl_per_token);
        state.step += 1;
        rows.push(TrainRow {
            step: state.step,
            phase: Phase::Train,
            breakdown,
            beta: model.hyper.beta,
        });
        let due = opts.val_every > 0 && state.step % opts.val_every == 0;
        if due && !val_blocks.is_empty() {
            rows.push(validate(model, &val_blocks, opts, state)?);
        }
    }
    if !val_blocks.is_empty() {
        rows.push(validate(model, &val_blocks, opts, state)?);
    }
    Ok(rows)
}

fn validate(
    model: &GpVaeModel,
    val_blocks: &[&TokenBlock],
    opts: &TrainOpts,
    state: &mut TrainerState,
) -> Result<TrainRow, ModelError> {
    let n = val_blocks.len().min(opts.val_blocks.max(1));
    let mut acc = ElboBreakdown {
        elbo_per_token: 0.0,
        ll0_per_token: 0.0,
        llmulti_per_token: 0.0,
        kl_per_token: 0.0,
        kl_capped_per_token: 0.0,
        ppl: 0.0,
    };
    // fixed sub-stream so validation never perturbs the training draw order
    const VAL_STREAM: u64 = 0x56a1_1da7_1055;
    let mut vrng = ChaCha8Rng::seed_from_u64(crate::mix_seed(VAL_STREAM, state.step, 0));
    for b in val_blocks.iter().take(n) {
        let (breakdown, _, _, _) = model.elbo(&b.tokens, opts.mode, &mut vrng)?;
        acc.elbo_per_token += breakdown.elbo_per_token;
        acc.ll0_per_token += breakdown.ll0_per_token;
        acc.llmulti_per_token += breakdown.llmulti_per_token;
        acc.kl_per_token += breakdown.kl_per_token;
        acc.kl_capped_per_token += breakdown.kl_capped_per_token;
    }
    let nf = n as f64;
    acc.elbo_per_token /= nf;
    acc.ll0_per_token /= nf;
    acc.llmulti_per_token /= nf;
    acc.kl_per_token /= nf;
    acc.kl_capped_per_token /= nf;
    acc.ppl = (-acc.ll0_per_token).exp();
    Ok(TrainRow { step: state.step, phase: Phase::Val, breakdown: acc, beta: model.hyper.beta })
}
