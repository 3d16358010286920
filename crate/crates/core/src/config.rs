//! Run configuration: a flat TOML file with a canonical (sorted-key)
//! serialization, so config digests and checkpoint-embedded configs are
//! stable across writers.

use crate::baseline::TfConfig;
use crate::gp::KernelConfig;
use crate::gpvae::{EncoderConfig, EncoderVariant, GpVaeHyper, LatentMode};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    GpvaeAr,
    GpvaeNonar,
    Transformer,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::GpvaeAr => "gpvae_ar",
            ModelKind::GpvaeNonar => "gpvae_nonar",
            ModelKind::Transformer => "transformer",
        }
    }

    pub fn latent_mode(&self) -> Option<LatentMode> {
        match self {
            ModelKind::GpvaeAr => Some(LatentMode::Ar),
            ModelKind::GpvaeNonar => Some(LatentMode::NonAr),
            ModelKind::Transformer => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub encoder: EncoderVariant,
    pub t_train: usize,
    pub d_z: usize,
    pub channels: usize,
    pub vocab: usize,

    pub kernel_variance: f64,
    pub kernel_lengthscale: f64,
    pub kernel_jitter: f64,
    /// Max conditioning window for long-horizon AR generation; 0 = unbounded.
    pub window: usize,

    pub kl_cap: f32,
    pub kl_target: f32,
    pub beta_init: f32,
    pub beta_min: f32,
    pub beta_max: f32,
    pub beta_eta: f32,
    pub label_smoothing: f32,
    pub lambda_emb: f32,
    pub n_multi: usize,

    pub tf_layers: usize,
    pub tf_heads: usize,
    pub tf_d_model: usize,
    pub tf_d_ff: usize,

    pub lr: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,

    pub steps: u64,
    pub seed: u64,
    pub corpus: Vec<String>,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub val_every: u64,
    pub val_blocks: usize,
    pub checkpoint_every: u64,

    pub lgen_grid: Vec<usize>,
    pub temperature: f32,
    pub n_prompts: usize,
    pub prompt_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::GpvaeAr,
            encoder: EncoderVariant::Pyramidal,
            t_train: 64,
            d_z: 16,
            channels: 64,
            vocab: 256,
            kernel_variance: 1.0,
            kernel_lengthscale: 3.0,
            kernel_jitter: 1e-5,
            window: 256,
            kl_cap: 8.0,
            kl_target: 8.0,
            beta_init: 0.02,
            beta_min: 1e-3,
            beta_max: 0.35,
            beta_eta: 0.01,
            label_smoothing: 0.1,
            lambda_emb: 1e-4,
            n_multi: 4,
            tf_layers: 4,
            tf_heads: 4,
            tf_d_model: 128,
            tf_d_ff: 512,
            lr: 3e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps: 2000,
            seed: 42,
            corpus: Vec::new(),
            split_train: 0.9,
            split_val: 0.05,
            split_test: 0.05,
            val_every: 100,
            val_blocks: 4,
            checkpoint_every: 500,
            lgen_grid: vec![32, 64, 128],
            temperature: 0.9,
            n_prompts: 4,
            prompt_len: 64,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &str) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Invalid(m));
        if self.t_train < 2 {
            return err("t_train must be >= 2".into());
        }
        if self.d_z == 0 || self.channels == 0 {
            return err("d_z and channels must be >= 1".into());
        }
        if self.vocab != 256 {
            return err(format!("vocab must be 256 for the byte tokenizer, got {}", self.vocab));
        }
        if !(self.kernel_variance > 0.0) || !(self.kernel_lengthscale > 0.0) {
            return err("kernel variance and lengthscale must be > 0".into());
        }
        if self.kernel_jitter < 0.0 {
            return err("kernel jitter must be >= 0".into());
        }
        if !(self.kl_cap > 0.0) {
            return err("kl_cap must be > 0".into());
        }
        if !(self.beta_init > 0.0 && self.beta_init <= self.beta_max) {
            return err(format!("beta_init {} outside (0, {}]", self.beta_init, self.beta_max));
        }
        let frac_sum = self.split_train + self.split_val + self.split_test;
        if (frac_sum - 1.0).abs() > 1e-9
            || self.split_train < 0.0
            || self.split_val < 0.0
            || self.split_test < 0.0
        {
            return err("split fractions must be non-negative and sum to 1".into());
        }
        if self.tf_d_model % self.tf_heads != 0 {
            return err(format!(
                "tf_d_model {} not divisible by tf_heads {}",
                self.tf_d_model, self.tf_heads
            ));
        }
        if self.lgen_grid.is_empty() || self.lgen_grid.iter().any(|&l| l == 0) {
            return err("lgen_grid must be non-empty with positive lengths".into());
        }
        if self.n_prompts == 0 || self.prompt_len == 0 {
            return err("n_prompts and prompt_len must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return err("label_smoothing must be in [0, 1)".into());
        }
        Ok(())
    }

    /// Canonical serialization: valid TOML with keys emitted in sorted
    /// order, one per line.
    pub fn canonical_toml(&self) -> String {
        let table = toml::Table::try_from(self).expect("config serializes");
        let sorted: BTreeMap<String, toml::Value> = table.into_iter().collect();
        let mut out = String::new();
        for (k, v) in sorted {
            let mut single = toml::Table::new();
            single.insert(k, v);
            out.push_str(&toml::to_string(&single).expect("scalar value serializes"));
        }
        out
    }

    pub fn kernel(&self) -> KernelConfig {
        KernelConfig {
            variance: self.kernel_variance,
            lengthscale: self.kernel_lengthscale,
            jitter: self.kernel_jitter,
        }
    }

    pub fn window_opt(&self) -> Option<usize> {
        if self.window == 0 {
            None
        } else {
            Some(self.window)
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig::of_variant(self.encoder, self.channels, self.d_z)
    }

    pub fn gpvae_hyper(&self) -> GpVaeHyper {
        GpVaeHyper {
            t_train: self.t_train,
            vocab: self.vocab,
            kl_cap: self.kl_cap,
            kl_target: self.kl_target,
            beta: self.beta_init,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
            beta_eta: self.beta_eta,
            label_smoothing: self.label_smoothing,
            lambda_emb: self.lambda_emb,
            n_multi: self.n_multi,
        }
    }

    pub fn tf_config(&self) -> TfConfig {
        TfConfig {
            layers: self.tf_layers,
            heads: self.tf_heads,
            d_model: self.tf_d_model,
            d_ff: self.tf_d_ff,
            context: self.t_train,
            vocab: self.vocab,
        }
    }
}
