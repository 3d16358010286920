//! GP-VAE language model: a causal dilated-convolution encoder producing a
//! per-step factorized Gaussian posterior, a parallel convolutional decoder
//! mapping latent trajectories to token logits, an ELBO objective with a KL
//! cap and a feedback-controlled KL weight, and prompt-conditioned
//! generation in either latent mode.

mod train;

pub use train::{train, Phase, TrainOpts, TrainRow, TrainerState};

use crate::gp::{
    extend_ar, extend_nonar, GpError, KernelConfig, KlPrior, LatentTrajectory, TrajectoryMode,
};
use crate::nd::{Node, Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("numeric failure in {op}")]
    Numeric { op: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Gp(#[from] GpError),
}

/// Which latent prior drives the KL term and the latent extension rule.
/// Everything else (encoder, decoder, reconstruction) is shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentMode {
    Ar,
    NonAr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderVariant {
    Pyramidal,
    TcnPlus,
}

/// Causal dilated encoder shape. The two presets share the layer recipe and
/// differ in depth and dilation schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub channels: usize,
    pub dilations: Vec<usize>,
    pub kernel_width: usize,
    pub d_z: usize,
}

impl EncoderConfig {
    /// Geometrically increasing dilations; receptive field 64 at k=2.
    pub fn pyramidal(channels: usize, d_z: usize) -> Self {
        EncoderConfig {
            variant: EncoderVariant::Pyramidal,
            channels,
            dilations: vec![1, 2, 4, 8, 16, 32],
            kernel_width: 2,
            d_z,
        }
    }

    /// Deeper schedule with doubled stages; receptive field 127 at k=2.
    pub fn tcn_plus(channels: usize, d_z: usize) -> Self {
        EncoderConfig {
            variant: EncoderVariant::TcnPlus,
            channels,
            dilations: vec![1, 1, 2, 2, 4, 4, 8, 8, 16, 16, 32, 32],
            kernel_width: 2,
            d_z,
        }
    }

    pub fn of_variant(variant: EncoderVariant, channels: usize, d_z: usize) -> Self {
        match variant {
            EncoderVariant::Pyramidal => Self::pyramidal(channels, d_z),
            EncoderVariant::TcnPlus => Self::tcn_plus(channels, d_z),
        }
    }

    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_width - 1) * self.dilations.iter().sum::<usize>()
    }

    pub fn validate(&self, t_train: usize) -> Result<(), ModelError> {
        if self.channels == 0 || self.d_z == 0 || self.dilations.is_empty() {
            return Err(ModelError::Contract("encoder config has empty dimensions".into()));
        }
        match self.variant {
            EncoderVariant::TcnPlus => {
                if self.receptive_field() < t_train {
                    return Err(ModelError::Contract(format!(
                        "tcn+ receptive field {} < training context {t_train}",
                        self.receptive_field()
                    )));
                }
            }
            EncoderVariant::Pyramidal => {
                let geometric = self
                    .dilations
                    .windows(2)
                    .all(|w| w[1] == 2 * w[0]);
                if !geometric || self.dilations.first() != Some(&1) {
                    return Err(ModelError::Contract(
                        "pyramidal encoder requires dilations 1,2,4,8,...".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// ELBO hyperparameters and the beta-controller state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpVaeHyper {
    pub t_train: usize,
    pub vocab: usize,
    /// Ceiling on the per-token KL contribution to the loss, in nats.
    pub kl_cap: f32,
    /// Controller setpoint for the observed KL per token.
    pub kl_target: f32,
    pub beta: f32,
    pub beta_min: f32,
    pub beta_max: f32,
    pub beta_eta: f32,
    pub label_smoothing: f32,
    pub lambda_emb: f32,
    /// Posterior samples for the multi-sample reconstruction estimate.
    pub n_multi: usize,
}

impl GpVaeHyper {
    pub fn desk(t_train: usize, vocab: usize) -> Self {
        GpVaeHyper {
            t_train,
            vocab,
            kl_cap: 8.0,
            kl_target: 8.0,
            beta: 0.02,
            beta_min: 1e-3,
            beta_max: 0.35,
            beta_eta: 0.01,
            label_smoothing: 0.1,
            lambda_emb: 1e-4,
            n_multi: 4,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.kl_cap > 0.0) {
            return Err(ModelError::Contract("kl_cap must be > 0".into()));
        }
        if !(self.beta > 0.0 && self.beta <= self.beta_max) {
            return Err(ModelError::Contract(format!(
                "beta {} outside (0, {}]",
                self.beta, self.beta_max
            )));
        }
        if self.n_multi == 0 {
            return Err(ModelError::Contract("n_multi must be >= 1".into()));
        }
        Ok(())
    }
}

/// One causal conv stage: convolution, layer norm, GELU, residual add.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub w: Tensor,
    pub ln_g: Tensor,
    pub ln_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct GpVaeWeights {
    pub embed: Tensor,
    pub enc_blocks: Vec<ConvBlock>,
    pub enc_mu: Tensor,
    pub enc_logvar: Tensor,
    pub logvar_bias: Tensor,
    pub dec_in: Tensor,
    pub dec_blocks: Vec<ConvBlock>,
    /// Output embedding matrix `[channels, vocab]`; its squared norm is
    /// penalized in the loss.
    pub out_embed: Tensor,
}

const DEC_DILATIONS: [usize; 3] = [1, 2, 4];
const LOGVAR_CLAMP: f32 = 10.0;

fn randn_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.sample(rand_distr::StandardNormal);
            v as f32 * std
        })
        .collect();
    let mut t = Tensor::new(shape, data);
    t.requires_grad = true;
    t
}

fn conv_block(rng: &mut ChaCha8Rng, k: usize, c: usize) -> ConvBlock {
    let std = 1.0 / ((k * c) as f32).sqrt();
    ConvBlock {
        w: randn_tensor(rng, vec![k, c, c], std),
        ln_g: Tensor::param(vec![c], vec![1.0; c]),
        ln_b: Tensor::param(vec![c], vec![0.0; c]),
    }
}

impl GpVaeWeights {
    fn init(encoder: &EncoderConfig, vocab: usize, rng: &mut ChaCha8Rng) -> Self {
        let c = encoder.channels;
        let k = encoder.kernel_width;
        let d_z = encoder.d_z;
        GpVaeWeights {
            embed: randn_tensor(rng, vec![vocab, c], 0.05),
            enc_blocks: encoder.dilations.iter().map(|_| conv_block(rng, k, c)).collect(),
            enc_mu: randn_tensor(rng, vec![1, c, d_z], 0.01),
            enc_logvar: randn_tensor(rng, vec![1, c, d_z], 0.01),
            // start with a tight posterior so the KL begins above the cap
            logvar_bias: Tensor::param(vec![d_z], vec![-2.0; d_z]),
            dec_in: randn_tensor(rng, vec![1, d_z, c], 1.0 / (d_z as f32).sqrt()),
            dec_blocks: DEC_DILATIONS.iter().map(|_| conv_block(rng, k, c)).collect(),
            out_embed: randn_tensor(rng, vec![c, vocab], 0.02),
        }
    }

    fn zeros(encoder: &EncoderConfig, vocab: usize) -> Self {
        let c = encoder.channels;
        let k = encoder.kernel_width;
        let d_z = encoder.d_z;
        let zero_block = || ConvBlock {
            w: Tensor::param(vec![k, c, c], vec![0.0; k * c * c]),
            ln_g: Tensor::param(vec![c], vec![0.0; c]),
            ln_b: Tensor::param(vec![c], vec![0.0; c]),
        };
        GpVaeWeights {
            embed: Tensor::param(vec![vocab, c], vec![0.0; vocab * c]),
            enc_blocks: (0..encoder.dilations.len()).map(|_| zero_block()).collect(),
            enc_mu: Tensor::param(vec![1, c, d_z], vec![0.0; c * d_z]),
            enc_logvar: Tensor::param(vec![1, c, d_z], vec![0.0; c * d_z]),
            logvar_bias: Tensor::param(vec![d_z], vec![0.0; d_z]),
            dec_in: Tensor::param(vec![1, d_z, c], vec![0.0; d_z * c]),
            dec_blocks: (0..DEC_DILATIONS.len()).map(|_| zero_block()).collect(),
            out_embed: Tensor::param(vec![c, vocab], vec![0.0; c * vocab]),
        }
    }

    /// Parameters in a fixed named order shared by the optimizer and the
    /// checkpoint format.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("embed".into(), &self.embed)];
        for (i, b) in self.enc_blocks.iter().enumerate() {
            out.push((format!("enc.{i}.w"), &b.w));
            out.push((format!("enc.{i}.ln_g"), &b.ln_g));
            out.push((format!("enc.{i}.ln_b"), &b.ln_b));
        }
        out.push(("enc_mu".into(), &self.enc_mu));
        out.push(("enc_logvar".into(), &self.enc_logvar));
        out.push(("logvar_bias".into(), &self.logvar_bias));
        out.push(("dec_in".into(), &self.dec_in));
        for (i, b) in self.dec_blocks.iter().enumerate() {
            out.push((format!("dec.{i}.w"), &b.w));
            out.push((format!("dec.{i}.ln_g"), &b.ln_g));
            out.push((format!("dec.{i}.ln_b"), &b.ln_b));
        }
        out.push(("out_embed".into(), &self.out_embed));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![("embed".into(), &mut self.embed)];
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            out.push((format!("enc.{i}.w"), &mut b.w));
            out.push((format!("enc.{i}.ln_g"), &mut b.ln_g));
            out.push((format!("enc.{i}.ln_b"), &mut b.ln_b));
        }
        out.push(("enc_mu".into(), &mut self.enc_mu));
        out.push(("enc_logvar".into(), &mut self.enc_logvar));
        out.push(("logvar_bias".into(), &mut self.logvar_bias));
        out.push(("dec_in".into(), &mut self.dec_in));
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            out.push((format!("dec.{i}.w"), &mut b.w));
            out.push((format!("dec.{i}.ln_g"), &mut b.ln_g));
            out.push((format!("dec.{i}.ln_b"), &mut b.ln_b));
        }
        out.push(("out_embed".into(), &mut self.out_embed));
        out
    }
}

/// Per-step factorized Gaussian posterior parameters.
#[derive(Debug, Clone)]
pub struct PosteriorParams {
    pub mu: Vec<f32>,
    pub logvar: Vec<f32>,
    pub t: usize,
    pub d_z: usize,
}

impl PosteriorParams {
    /// Posterior means as a latent trajectory.
    pub fn mean_trajectory(&self) -> LatentTrajectory {
        LatentTrajectory::new(
            self.mu.iter().map(|&v| v as f64).collect(),
            self.t,
            self.d_z,
            TrajectoryMode::Posterior,
        )
    }
}

/// Per-step loss readouts shaped like the training-table columns.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub elbo_per_token: f64,
    pub ll0_per_token: f64,
    pub llmulti_per_token: f64,
    pub kl_per_token: f64,
    pub kl_capped_per_token: f64,
    pub ppl: f64,
}

pub struct GpVaeModel {
    pub encoder: EncoderConfig,
    pub kernel: KernelConfig,
    pub hyper: GpVaeHyper,
    pub weights: GpVaeWeights,
}

/// Tape handles for all weights, in `named()` order.
struct Bound {
    embed: Node,
    enc_blocks: Vec<(Node, Node, Node)>,
    enc_mu: Node,
    enc_logvar: Node,
    logvar_bias: Node,
    dec_in: Node,
    dec_blocks: Vec<(Node, Node, Node)>,
    out_embed: Node,
}

impl Bound {
    fn in_named_order(&self) -> Vec<Node> {
        let mut out = vec![self.embed];
        for &(w, g, b) in &self.enc_blocks {
            out.extend([w, g, b]);
        }
        out.extend([self.enc_mu, self.enc_logvar, self.logvar_bias, self.dec_in]);
        for &(w, g, b) in &self.dec_blocks {
            out.extend([w, g, b]);
        }
        out.push(self.out_embed);
        out
    }
}

impl GpVaeModel {
    pub fn new(
        encoder: EncoderConfig,
        kernel: KernelConfig,
        hyper: GpVaeHyper,
        seed: u64,
    ) -> Result<Self, ModelError> {
        encoder.validate(hyper.t_train)?;
        hyper.validate()?;
        kernel.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = GpVaeWeights::init(&encoder, hyper.vocab, &mut rng);
        Ok(GpVaeModel { encoder, kernel, hyper, weights })
    }

    /// All-zero weights; used by tests that pin degenerate behavior.
    pub fn zero_init(
        encoder: EncoderConfig,
        kernel: KernelConfig,
        hyper: GpVaeHyper,
    ) -> Result<Self, ModelError> {
        encoder.validate(hyper.t_train)?;
        hyper.validate()?;
        kernel.validate()?;
        let weights = GpVaeWeights::zeros(&encoder, hyper.vocab);
        Ok(GpVaeModel { encoder, kernel, hyper, weights })
    }

    fn bind(&self, tape: &mut Tape) -> Bound {
        let w = &self.weights;
        Bound {
            embed: tape.leaf(&w.embed),
            enc_blocks: w
                .enc_blocks
                .iter()
                .map(|b| (tape.leaf(&b.w), tape.leaf(&b.ln_g), tape.leaf(&b.ln_b)))
                .collect(),
            enc_mu: tape.leaf(&w.enc_mu),
            enc_logvar: tape.leaf(&w.enc_logvar),
            logvar_bias: tape.leaf(&w.logvar_bias),
            dec_in: tape.leaf(&w.dec_in),
            dec_blocks: w
                .dec_blocks
                .iter()
                .map(|b| (tape.leaf(&b.w), tape.leaf(&b.ln_g), tape.leaf(&b.ln_b)))
                .collect(),
            out_embed: tape.leaf(&w.out_embed),
        }
    }

    fn encode_nodes(&self, tape: &mut Tape, bound: &Bound, tokens: &[u32]) -> (Node, Node) {
        let mut h = tape.embedding(bound.embed, tokens);
        for (&(w, g, b), &dil) in bound.enc_blocks.iter().zip(&self.encoder.dilations) {
            let c = tape.conv1d_causal(h, w, dil);
            let n = tape.layer_norm(c, g, b);
            let a = tape.gelu(n);
            h = tape.add(h, a);
        }
        let mu = tape.conv1d_causal(h, bound.enc_mu, 1);
        let lv_raw = tape.conv1d_causal(h, bound.enc_logvar, 1);
        let lv_biased = tape.add_row(lv_raw, bound.logvar_bias);
        let logvar = tape.clamp(lv_biased, -LOGVAR_CLAMP, LOGVAR_CLAMP);
        (mu, logvar)
    }

    fn decode_nodes(&self, tape: &mut Tape, bound: &Bound, z: Node) -> Node {
        let mut h = tape.conv1d_causal(z, bound.dec_in, 1);
        for (&(w, g, b), &dil) in bound.dec_blocks.iter().zip(&DEC_DILATIONS) {
            let c = tape.conv1d_causal(h, w, dil);
            let n = tape.layer_norm(c, g, b);
            let a = tape.gelu(n);
            h = tape.add(h, a);
        }
        tape.matmul(h, bound.out_embed)
    }

    /// Posterior parameters for a token sequence. Causal: position `t`
    /// depends only on tokens at positions `<= t`.
    pub fn encode(&self, tokens: &[u32]) -> Result<PosteriorParams, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Contract("encode needs at least one token".into()));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (mu, logvar) = self.encode_nodes(&mut tape, &bound, tokens);
        if let Some(op) = tape.first_nonfinite() {
            return Err(ModelError::Numeric { op: op.to_string() });
        }
        Ok(PosteriorParams {
            mu: tape.value(mu).to_vec(),
            logvar: tape.value(logvar).to_vec(),
            t: tokens.len(),
            d_z: self.encoder.d_z,
        })
    }

    /// Token logits for a latent trajectory. The decoder never sees tokens:
    /// its output is a function of `z` alone.
    pub fn decode(&self, z: &LatentTrajectory) -> Result<Vec<f32>, ModelError> {
        if z.d_z != self.encoder.d_z {
            return Err(ModelError::Contract(format!(
                "latent dim {} does not match model d_z {}",
                z.d_z, self.encoder.d_z
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let zt = Tensor::new(vec![z.t, z.d_z], z.values.iter().map(|&v| v as f32).collect());
        let zn = tape.constant(&zt);
        let logits = self.decode_nodes(&mut tape, &bound, zn);
        if let Some(op) = tape.first_nonfinite() {
            return Err(ModelError::Numeric { op: op.to_string() });
        }
        Ok(tape.value(logits).to_vec())
    }

    /// Build the training loss on a fresh tape and report the breakdown.
    /// Returns the tape, the loss node, and the bound parameter nodes in
    /// `named()` order so the caller can run backward and step the optimizer.
    pub fn elbo(
        &self,
        x: &[u32],
        mode: LatentMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ElboBreakdown, Tape, Node, Vec<Node>), ModelError> {
        let t = self.hyper.t_train;
        if x.len() != t {
            return Err(ModelError::Contract(format!(
                "elbo expects a block of length {t}, got {}",
                x.len()
            )));
        }
        let d_z = self.encoder.d_z;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (mu, logvar) = self.encode_nodes(&mut tape, &bound, x);

        // reparameterized sample: z = mu + exp(logvar/2) * eps
        let eps = randn_const(rng, t * d_z);
        let eps_n = tape.constant(&Tensor::new(vec![t, d_z], eps));
        let half_lv = tape.scale(logvar, 0.5);
        let std = tape.exp(half_lv);
        let noise = tape.mul(std, eps_n);
        let z = tape.add(mu, noise);

        let logits = self.decode_nodes(&mut tape, &bound, z);
        let ce = tape.cross_entropy_smoothed(logits, x, self.hyper.label_smoothing);
        let recon_total = tape.scale(ce, t as f32);

        // KL bridge against the mode's prior, gradients computed in f64
        let prior = match mode {
            LatentMode::Ar => KlPrior::full(&self.kernel, t)?,
            LatentMode::NonAr => KlPrior::diagonal(&self.kernel, t)?,
        };
        let mu64: Vec<f64> = tape.value(mu).iter().map(|&v| v as f64).collect();
        let var64: Vec<f64> = tape.value(logvar).iter().map(|&v| (v as f64).exp()).collect();
        let (kl, dmu, dlogvar) = prior.kl_with_grads(&mu64, &var64, d_z)?;
        let kl_node = tape.scalar_bridge(
            &[mu, logvar],
            kl as f32,
            vec![
                dmu.iter().map(|&v| v as f32).collect(),
                dlogvar.iter().map(|&v| v as f32).collect(),
            ],
        );
        let kl_per_token = tape.scale(kl_node, 1.0 / t as f32);
        let kl_capped = tape.min_const(kl_per_token, self.hyper.kl_cap);
        let kl_term = tape.scale(kl_capped, self.hyper.beta * t as f32);

        let emb_sq = tape.sum_squares(bound.out_embed);
        let emb_pen = tape.scale(emb_sq, self.hyper.lambda_emb);

        let partial = tape.add(recon_total, kl_term);
        let loss = tape.add(partial, emb_pen);

        if let Some(op) = tape.first_nonfinite() {
            return Err(ModelError::Numeric { op: op.to_string() });
        }

        // readouts: LL_0 at the posterior mean, LL_multi over fresh samples
        let logits0 = self.decode_nodes(&mut tape, &bound, mu);
        let ce0 = tape.cross_entropy_smoothed(logits0, x, 0.0);
        let ll0 = -(tape.scalar_value(ce0) as f64);
        let mut llmulti_acc = 0.0f64;
        for _ in 0..self.hyper.n_multi {
            let eps_i = randn_const(rng, t * d_z);
            let eps_in = tape.constant(&Tensor::new(vec![t, d_z], eps_i));
            let noise_i = tape.mul(std, eps_in);
            let z_i = tape.add(mu, noise_i);
            let logits_i = self.decode_nodes(&mut tape, &bound, z_i);
            let ce_i = tape.cross_entropy_smoothed(logits_i, x, 0.0);
            llmulti_acc -= tape.scalar_value(ce_i) as f64;
        }
        let llmulti = llmulti_acc / self.hyper.n_multi as f64;
        let kl_per_token_v = tape.scalar_value(kl_per_token) as f64;
        let breakdown = ElboBreakdown {
            elbo_per_token: llmulti - kl_per_token_v,
            ll0_per_token: ll0,
            llmulti_per_token: llmulti,
            kl_per_token: kl_per_token_v,
            kl_capped_per_token: tape.scalar_value(kl_capped) as f64,
            ppl: (-ll0).exp(),
        };
        if let Some(op) = tape.first_nonfinite() {
            return Err(ModelError::Numeric { op: op.to_string() });
        }
        Ok((breakdown, tape, loss, bound.in_named_order()))
    }

    /// Multiplicative feedback on the KL weight: raise while the observed KL
    /// per token sits above target, decay otherwise (an exact hit counts as
    /// not-above), clamped to `[beta_min, beta_max]`.
    pub fn beta_update(&mut self, observed_kl_per_token: f64) -> f32 {
        let h = &mut self.hyper;
        let factor = if observed_kl_per_token > h.kl_target as f64 {
            1.0 + h.beta_eta
        } else {
            1.0 - h.beta_eta
        };
        h.beta = (h.beta * factor).clamp(h.beta_min, h.beta_max);
        h.beta
    }

    /// Prompt-conditioned generation. The prompt is encoded to posterior
    /// means `z_{1:P}`; the trajectory is extended by `l_gen` steps with the
    /// mode's latent rule (AR: windowed GP conditionals; non-AR: independent
    /// draws); the full trajectory is decoded in one parallel pass and the
    /// continuation tokens are sampled per position at `temperature`.
    pub fn generate(
        &self,
        prompt: &[u32],
        l_gen: usize,
        mode: LatentMode,
        window: Option<usize>,
        temperature: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<Generation, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::Contract("generate needs a non-empty prompt".into()));
        }
        if l_gen == 0 {
            return Err(ModelError::Contract("l_gen must be >= 1".into()));
        }
        let p = prompt.len();
        let d_z = self.encoder.d_z;
        let posterior = self.encode(prompt)?;
        let prefix: Vec<f64> = posterior.mu.iter().map(|&v| v as f64).collect();
        let values = match mode {
            LatentMode::Ar => extend_ar(&self.kernel, window, &prefix, d_z, l_gen, rng)?,
            LatentMode::NonAr => extend_nonar(&self.kernel, &prefix, d_z, l_gen, rng)?,
        };
        let traj_mode = match mode {
            LatentMode::Ar => TrajectoryMode::Ar,
            LatentMode::NonAr => TrajectoryMode::NonAr,
        };
        let z = LatentTrajectory::new(values, p + l_gen, d_z, traj_mode);
        let logits = self.decode(&z)?;
        let v = self.hyper.vocab;
        let mut tokens = Vec::with_capacity(l_gen);
        for pos in p..p + l_gen {
            tokens.push(sample_token(&logits[pos * v..(pos + 1) * v], temperature, rng));
        }
        Ok(Generation { tokens, latent: z })
    }

    /// Teacher-forced perplexity of a continuation under the model's own
    /// factorization: encode prompt+continuation, decode the posterior-mean
    /// latents, and average the per-position cross-entropy over continuation
    /// positions only.
    pub fn continuation_ppl(
        &self,
        prompt: &[u32],
        continuation: &[u32],
    ) -> Result<f64, ModelError> {
        if continuation.is_empty() {
            return Err(ModelError::Contract("continuation must be non-empty".into()));
        }
        let mut full = prompt.to_vec();
        full.extend_from_slice(continuation);
        let posterior = self.encode(&full)?;
        let logits = self.decode(&posterior.mean_trajectory())?;
        let v = self.hyper.vocab;
        let mut nll = 0.0f64;
        for (i, &tok) in continuation.iter().enumerate() {
            let pos = prompt.len() + i;
            let row = &logits[pos * v..(pos + 1) * v];
            nll -= log_softmax_at(row, tok as usize);
        }
        Ok((nll / continuation.len() as f64).exp())
    }
}

/// A generated continuation together with the latent trajectory that
/// produced it (prompt posterior means plus the sampled extension).
#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub latent: LatentTrajectory,
}

fn randn_const(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.sample(rand_distr::StandardNormal);
            v as f32
        })
        .collect()
}

/// Log-softmax of one logit row at an index, in f64.
pub(crate) fn log_softmax_at(row: &[f32], idx: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
    row[idx] as f64 - max - sum.ln()
}

/// Sample a token id from a logit row. `temperature <= 0` means argmax.
pub(crate) fn sample_token(row: &[f32], temperature: f32, rng: &mut ChaCha8Rng) -> u32 {
    if temperature <= 0.0 {
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let temp = temperature as f64;
    let weights: Vec<f64> = row.iter().map(|&x| ((x as f64 - max) / temp).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i as u32;
        }
    }
    (row.len() - 1) as u32
}
