//! Language modeling with the sequential structure carried by a causal
//! Gaussian-process latent prior.
//!
//! The crate provides three models trained under matched conditions — a
//! GP-VAE whose latent trajectory follows causal GP conditionals, the same
//! model with independent latents, and a token-autoregressive transformer —
//! plus the latent/text diagnostics used to contrast them and a CLI that runs
//! the full ablation pipeline.

pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gp;
pub mod gpvae;
pub mod metrics;
pub mod nd;
pub mod pipeline;

/// Derive a stream seed from a base seed and labels, so parallel evaluation
/// and per-purpose RNGs stay deterministic. SplitMix64 finalizer.
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut x = base ^ a.rotate_left(17) ^ b.rotate_left(41);
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
