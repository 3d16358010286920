//! Checkpoint persistence: magic-tagged binary container with the canonical
//! config text, trainer state (step, KL weight, RNG position), named `f32`
//! parameter tensors, and Adam accumulators. Everything on disk is
//! little-endian regardless of host; `load(save(x))` is bit-exact.

use crate::baseline::{TfTrainerState, Transformer};
use crate::config::{ModelKind, RunConfig};
use crate::gpvae::{GpVaeModel, TrainOpts, TrainerState};
use crate::nd::{AdamState, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 6] = b"GPVLM1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint does not match config: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub step: u64,
    pub beta: f32,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub params: Vec<(String, Tensor)>,
    pub adam_step: u64,
    pub adam_m: Vec<Vec<f32>>,
    pub adam_v: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn config(&self) -> Result<RunConfig, CheckpointError> {
        RunConfig::from_toml(&self.config_text)
            .map_err(|e| CheckpointError::Format(format!("embedded config: {e}")))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = ck.config_text.as_bytes();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg);
    buf.extend_from_slice(&ck.step.to_le_bytes());
    buf.extend_from_slice(&ck.beta.to_le_bytes());
    buf.extend_from_slice(&ck.rng_seed);
    buf.extend_from_slice(&ck.rng_word_pos.to_le_bytes());
    buf.extend_from_slice(&(ck.params.len() as u32).to_le_bytes());
    for (name, t) in &ck.params {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&ck.adam_step.to_le_bytes());
    buf.extend_from_slice(&(ck.adam_m.len() as u32).to_le_bytes());
    for (m, v) in ck.adam_m.iter().zip(&ck.adam_v) {
        buf.extend_from_slice(&(m.len() as u64).to_le_bytes());
        for &x in m {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        for &x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path.as_ref()).map_err(|source| CheckpointError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })?;
    f.write_all(&buf).map_err(|source| CheckpointError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Format(format!(
                "truncated: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let buf = fs::read(path.as_ref()).map_err(|source| CheckpointError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(6)? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| CheckpointError::Format("config is not utf-8".into()))?;
    let step = r.u64()?;
    let beta = r.f32()?;
    let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let rng_word_pos = r.u128()?;
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Format("tensor name is not utf-8".into()))?;
        let ndims = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u64()? as usize);
        }
        let len = r.u64()? as usize;
        if shape.iter().product::<usize>() != len {
            return Err(CheckpointError::Format(format!(
                "tensor {name}: shape {shape:?} does not match length {len}"
            )));
        }
        let data = r.f32_vec(len)?;
        let mut t = Tensor::new(shape, data);
        t.requires_grad = true;
        params.push((name, t));
    }
    let adam_step = r.u64()?;
    let n_opt = r.u32()? as usize;
    if n_opt != n_params {
        return Err(CheckpointError::Format(format!(
            "{n_opt} optimizer slots for {n_params} tensors"
        )));
    }
    let mut adam_m = Vec::with_capacity(n_opt);
    let mut adam_v = Vec::with_capacity(n_opt);
    for i in 0..n_opt {
        let len = r.u64()? as usize;
        if len != params[i].1.numel() {
            return Err(CheckpointError::Format(format!(
                "optimizer slot {i} has length {len}, tensor has {}",
                params[i].1.numel()
            )));
        }
        adam_m.push(r.f32_vec(len)?);
        adam_v.push(r.f32_vec(len)?);
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Format(format!(
            "{} trailing bytes after checkpoint payload",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config_text,
        step,
        beta,
        rng_seed,
        rng_word_pos,
        params,
        adam_step,
        adam_m,
        adam_v,
    })
}

/// Capture a GP-VAE model plus trainer state.
pub fn snapshot_gpvae(cfg: &RunConfig, model: &GpVaeModel, state: &TrainerState) -> Checkpoint {
    Checkpoint {
        config_text: cfg.canonical_toml(),
        step: state.step,
        beta: model.hyper.beta,
        rng_seed: state.rng.get_seed(),
        rng_word_pos: state.rng.get_word_pos(),
        params: model.weights.named().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        adam_step: state.adam.step_count,
        adam_m: state.adam.first_moment.clone(),
        adam_v: state.adam.second_moment.clone(),
    }
}

/// Capture a transformer model plus trainer state.
pub fn snapshot_tf(cfg: &RunConfig, model: &Transformer, state: &TfTrainerState) -> Checkpoint {
    Checkpoint {
        config_text: cfg.canonical_toml(),
        step: state.step,
        beta: 0.0,
        rng_seed: state.rng.get_seed(),
        rng_word_pos: state.rng.get_word_pos(),
        params: model.weights.named().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        adam_step: state.adam.step_count,
        adam_m: state.adam.first_moment.clone(),
        adam_v: state.adam.second_moment.clone(),
    }
}

fn restore_tensors(
    targets: Vec<(String, &mut Tensor)>,
    stored: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    if targets.len() != stored.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} tensors stored, model has {}",
            stored.len(),
            targets.len()
        )));
    }
    for ((tname, t), (sname, s)) in targets.into_iter().zip(stored) {
        if &tname != sname {
            return Err(CheckpointError::Mismatch(format!(
                "tensor order mismatch: {tname} vs {sname}"
            )));
        }
        if t.shape != s.shape {
            return Err(CheckpointError::Mismatch(format!(
                "tensor {tname}: shape {:?} vs stored {:?}",
                t.shape, s.shape
            )));
        }
        t.data.copy_from_slice(&s.data);
    }
    Ok(())
}

fn restore_rng(ck: &Checkpoint) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(ck.rng_seed);
    rng.set_word_pos(ck.rng_word_pos);
    rng
}

fn restore_adam(ck: &Checkpoint, lr: f32, b1: f32, b2: f32, eps: f32) -> AdamState {
    AdamState {
        step_count: ck.adam_step,
        lr,
        beta1: b1,
        beta2: b2,
        eps,
        first_moment: ck.adam_m.clone(),
        second_moment: ck.adam_v.clone(),
    }
}

/// Rebuild a GP-VAE model and its trainer state from a checkpoint.
pub fn restore_gpvae(
    ck: &Checkpoint,
) -> Result<(RunConfig, GpVaeModel, TrainerState), CheckpointError> {
    let cfg = ck.config()?;
    if cfg.model == ModelKind::Transformer {
        return Err(CheckpointError::Mismatch("checkpoint holds a transformer".into()));
    }
    let mut model = GpVaeModel::new(cfg.encoder_config(), cfg.kernel(), cfg.gpvae_hyper(), cfg.seed)
        .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    model.hyper.beta = ck.beta;
    restore_tensors(model.weights.named_mut(), &ck.params)?;
    let state = TrainerState {
        adam: restore_adam(ck, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
        rng: restore_rng(ck),
        step: ck.step,
    };
    Ok((cfg, model, state))
}

/// Rebuild a transformer and its trainer state from a checkpoint.
pub fn restore_tf(
    ck: &Checkpoint,
) -> Result<(RunConfig, Transformer, TfTrainerState), CheckpointError> {
    let cfg = ck.config()?;
    if cfg.model != ModelKind::Transformer {
        return Err(CheckpointError::Mismatch("checkpoint holds a gpvae model".into()));
    }
    let mut model = Transformer::new(cfg.tf_config(), cfg.seed)
        .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    restore_tensors(model.weights.named_mut(), &ck.params)?;
    let state = TfTrainerState {
        adam: restore_adam(ck, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
        rng: restore_rng(ck),
        step: ck.step,
    };
    Ok((cfg, model, state))
}

/// Fresh trainer state for a new run of this config.
pub fn fresh_gpvae(cfg: &RunConfig) -> Result<(GpVaeModel, TrainerState), CheckpointError> {
    let model = GpVaeModel::new(cfg.encoder_config(), cfg.kernel(), cfg.gpvae_hyper(), cfg.seed)
        .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    let opts = TrainOpts {
        mode: cfg.model.latent_mode().unwrap_or(crate::gpvae::LatentMode::Ar),
        lr: cfg.lr,
        adam_beta1: cfg.adam_beta1,
        adam_beta2: cfg.adam_beta2,
        adam_eps: cfg.adam_eps,
        val_every: cfg.val_every,
        val_blocks: cfg.val_blocks,
    };
    let state = TrainerState::fresh(&model, &opts, cfg.seed);
    Ok((model, state))
}
