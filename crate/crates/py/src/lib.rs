//! Python bindings for the gpvlm models and diagnostics.
//!
//! The module mirrors the library surface at desk scale: byte tokenization,
//! GP trajectory sampling and log-densities, text collapse metrics, and the
//! two trainable models with checkpoint round-trips.

use gpvlm::baseline::{TfTrainerState, Transformer};
use gpvlm::checkpoint::{
    fresh_gpvae, load_checkpoint, restore_gpvae, restore_tf, save_checkpoint, snapshot_gpvae,
    snapshot_tf,
};
use gpvlm::config::{ModelKind, RunConfig};
use gpvlm::data::{build_blocks, split, Corpus};
use gpvlm::gp::{KernelConfig, LatentTrajectory, TrajectoryMode};
use gpvlm::gpvae::{GpVaeModel, LatentMode, TrainOpts, TrainerState};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn kernel(variance: f64, lengthscale: f64, jitter: f64) -> PyResult<KernelConfig> {
    let cfg = KernelConfig { variance, lengthscale, jitter };
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

fn rows(values: &[f64], t: usize, d: usize) -> Vec<Vec<f64>> {
    (0..t).map(|i| values[i * d..(i + 1) * d].to_vec()).collect()
}

fn trajectory(values: Vec<Vec<f64>>) -> PyResult<LatentTrajectory> {
    if values.is_empty() || values[0].is_empty() {
        return Err(PyValueError::new_err("trajectory must be a non-empty T x d_z list"));
    }
    let d = values[0].len();
    if values.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("trajectory rows must have equal length"));
    }
    let t = values.len();
    let flat: Vec<f64> = values.into_iter().flatten().collect();
    Ok(LatentTrajectory::new(flat, t, d, TrajectoryMode::Posterior))
}

fn parse_mode(mode: &str) -> PyResult<LatentMode> {
    match mode {
        "ar" => Ok(LatentMode::Ar),
        "nonar" => Ok(LatentMode::NonAr),
        other => Err(PyValueError::new_err(format!("mode must be 'ar' or 'nonar', got {other:?}"))),
    }
}

/// Identity byte tokenizer (V = 256).
#[pyfunction]
fn tokenize(text: &[u8]) -> Vec<u32> {
    gpvlm::data::tokenize(text)
}

#[pyfunction]
fn detokenize<'py>(py: Python<'py>, tokens: Vec<u32>) -> PyResult<Bound<'py, PyBytes>> {
    if tokens.iter().any(|&t| t > 255) {
        return Err(PyValueError::new_err("byte tokens must be < 256"));
    }
    Ok(PyBytes::new(py, &gpvlm::data::detokenize(&tokens)))
}

/// Dense T x T squared-exponential kernel matrix.
#[pyfunction]
fn kernel_matrix(variance: f64, lengthscale: f64, jitter: f64, t: usize) -> PyResult<Vec<Vec<f64>>> {
    let cfg = kernel(variance, lengthscale, jitter)?;
    let k = gpvlm::gp::kernel_matrix(&cfg, t).map_err(value_err)?;
    Ok(rows(&k, t, t))
}

/// Sample a causal AR trajectory from the GP prior; returns T rows of d_z.
#[pyfunction]
#[pyo3(signature = (variance, lengthscale, jitter, t, d_z, seed, window=None))]
#[allow(clippy::too_many_arguments)]
fn sample_ar_trajectory(
    variance: f64,
    lengthscale: f64,
    jitter: f64,
    t: usize,
    d_z: usize,
    seed: u64,
    window: Option<usize>,
) -> PyResult<Vec<Vec<f64>>> {
    let cfg = kernel(variance, lengthscale, jitter)?;
    let z = gpvlm::gp::sample_ar_trajectory(&cfg, t, d_z, window, seed).map_err(runtime_err)?;
    Ok(rows(&z.values, t, d_z))
}

/// Sample independent latents with the same marginal variance.
#[pyfunction]
fn sample_nonar_trajectory(
    variance: f64,
    lengthscale: f64,
    jitter: f64,
    t: usize,
    d_z: usize,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let cfg = kernel(variance, lengthscale, jitter)?;
    let z = gpvlm::gp::sample_nonar_trajectory(&cfg, t, d_z, seed).map_err(runtime_err)?;
    Ok(rows(&z.values, t, d_z))
}

/// Joint log-density under the correlated GP prior, total nats.
#[pyfunction]
fn logdensity_gp(
    variance: f64,
    lengthscale: f64,
    jitter: f64,
    values: Vec<Vec<f64>>,
) -> PyResult<f64> {
    let cfg = kernel(variance, lengthscale, jitter)?;
    gpvlm::gp::logdensity_gp(&cfg, &trajectory(values)?).map_err(runtime_err)
}

/// Log-density under the independent prior with identical marginals.
#[pyfunction]
fn logdensity_diag(
    variance: f64,
    lengthscale: f64,
    jitter: f64,
    values: Vec<Vec<f64>>,
) -> PyResult<f64> {
    let cfg = kernel(variance, lengthscale, jitter)?;
    gpvlm::gp::logdensity_diag(&cfg, &trajectory(values)?).map_err(runtime_err)
}

/// KL from a per-step factorized Gaussian posterior to the GP prior.
#[pyfunction]
fn kl_posterior_to_gp(
    variance: f64,
    lengthscale: f64,
    jitter: f64,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
) -> PyResult<f64> {
    let cfg = kernel(variance, lengthscale, jitter)?;
    let m = trajectory(means)?;
    let v = trajectory(variances)?;
    if m.t != v.t || m.d_z != v.d_z {
        return Err(PyValueError::new_err("means and variances must have the same shape"));
    }
    gpvlm::gp::kl_posterior_to_gp(&m.values, &v.values, m.t, m.d_z, &cfg).map_err(value_err)
}

#[pyfunction]
fn cosine_autocorr(values: Vec<Vec<f64>>, k: usize) -> PyResult<f64> {
    gpvlm::metrics::cosine_autocorr(&trajectory(values)?, k).map_err(value_err)
}

#[pyfunction]
fn step_norm_stats(values: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    gpvlm::metrics::step_norm_stats(&trajectory(values)?).map_err(value_err)
}

#[pyfunction]
fn rep_n(tokens: Vec<u32>, n: usize) -> PyResult<f64> {
    gpvlm::metrics::rep_n(&tokens, n).map_err(value_err)
}

#[pyfunction]
fn consec_frac(tokens: Vec<u32>) -> PyResult<f64> {
    gpvlm::metrics::consec_frac(&tokens).map_err(value_err)
}

/// Returns (loop_cover, catastrophic).
#[pyfunction]
fn loop_detect(tokens: Vec<u32>, l_max: usize) -> (f64, bool) {
    gpvlm::metrics::loop_detect(&tokens, l_max)
}

#[pyfunction]
#[pyo3(signature = (tokens, judge_probs, threshold=1e-4))]
fn rare_frac(tokens: Vec<u32>, judge_probs: Vec<f64>, threshold: f64) -> PyResult<f64> {
    gpvlm::metrics::rare_frac(&tokens, &judge_probs, threshold).map_err(value_err)
}

fn blocks_from_bytes(
    cfg: &RunConfig,
    corpus: &[u8],
) -> PyResult<Vec<gpvlm::data::TokenBlock>> {
    let c = Corpus::from_bytes(corpus);
    let mut blocks = build_blocks(&c, cfg.t_train).map_err(value_err)?;
    split(&mut blocks, (cfg.split_train, cfg.split_val, cfg.split_test), cfg.seed)
        .map_err(value_err)?;
    Ok(blocks)
}

fn breakdown_dict<'py>(
    py: Python<'py>,
    row: &gpvlm::gpvae::TrainRow,
) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", row.step)?;
    d.set_item("phase", match row.phase {
        gpvlm::gpvae::Phase::Train => "train",
        gpvlm::gpvae::Phase::Val => "val",
    })?;
    d.set_item("elbo_per_token", row.breakdown.elbo_per_token)?;
    d.set_item("ll0_per_token", row.breakdown.ll0_per_token)?;
    d.set_item("llmulti_per_token", row.breakdown.llmulti_per_token)?;
    d.set_item("kl_per_token", row.breakdown.kl_per_token)?;
    d.set_item("kl_capped_per_token", row.breakdown.kl_capped_per_token)?;
    d.set_item("ppl", row.breakdown.ppl)?;
    d.set_item("beta", row.beta)?;
    Ok(d)
}

/// GP-VAE language model with a causal GP latent prior.
#[pyclass]
struct GpVae {
    cfg: RunConfig,
    model: GpVaeModel,
    state: TrainerState,
}

impl GpVae {
    fn opts(&self) -> TrainOpts {
        TrainOpts {
            mode: self.cfg.model.latent_mode().unwrap_or(LatentMode::Ar),
            lr: self.cfg.lr,
            adam_beta1: self.cfg.adam_beta1,
            adam_beta2: self.cfg.adam_beta2,
            adam_eps: self.cfg.adam_eps,
            val_every: 0,
            val_blocks: self.cfg.val_blocks,
        }
    }
}

#[pymethods]
impl GpVae {
    /// Build from a (possibly partial) TOML config string.
    #[new]
    #[pyo3(signature = (config_toml=""))]
    fn new(config_toml: &str) -> PyResult<Self> {
        let cfg = RunConfig::from_toml(config_toml).map_err(value_err)?;
        if cfg.model == ModelKind::Transformer {
            return Err(PyValueError::new_err("config names a transformer; use TransformerLm"));
        }
        let (model, state) = fresh_gpvae(&cfg).map_err(value_err)?;
        Ok(GpVae { cfg, model, state })
    }

    /// Train on raw corpus bytes; returns one dict per step.
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        corpus: &[u8],
        steps: u64,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let blocks = blocks_from_bytes(&self.cfg, corpus)?;
        let opts = self.opts();
        let rows = gpvlm::gpvae::train(&mut self.model, &blocks, &opts, &mut self.state, steps)
            .map_err(runtime_err)?;
        rows.iter().map(|r| breakdown_dict(py, r)).collect()
    }

    /// Generate a byte continuation of `l_gen` tokens.
    #[pyo3(signature = (prompt, l_gen, mode="ar", temperature=0.9, seed=0))]
    fn generate<'py>(
        &self,
        py: Python<'py>,
        prompt: &[u8],
        l_gen: usize,
        mode: &str,
        temperature: f32,
        seed: u64,
    ) -> PyResult<Bound<'py, PyBytes>> {
        let mode = parse_mode(mode)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = self
            .model
            .generate(
                &gpvlm::data::tokenize(prompt),
                l_gen,
                mode,
                self.cfg.window_opt(),
                temperature,
                &mut rng,
            )
            .map_err(runtime_err)?;
        Ok(PyBytes::new(py, &gpvlm::data::detokenize(&g.tokens)))
    }

    /// Posterior means for a byte sequence, as T rows of d_z.
    fn encode_means(&self, text: &[u8]) -> PyResult<Vec<Vec<f64>>> {
        let p = self.model.encode(&gpvlm::data::tokenize(text)).map_err(runtime_err)?;
        let z = p.mean_trajectory();
        Ok(rows(&z.values, z.t, z.d_z))
    }

    /// Teacher-forced continuation perplexity under the model's own
    /// factorization.
    fn continuation_ppl(&self, prompt: &[u8], continuation: &[u8]) -> PyResult<f64> {
        self.model
            .continuation_ppl(
                &gpvlm::data::tokenize(prompt),
                &gpvlm::data::tokenize(continuation),
            )
            .map_err(runtime_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(path, &snapshot_gpvae(&self.cfg, &self.model, &self.state))
            .map_err(runtime_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = load_checkpoint(path).map_err(value_err)?;
        let (cfg, model, state) = restore_gpvae(&ck).map_err(value_err)?;
        Ok(GpVae { cfg, model, state })
    }

    #[getter]
    fn beta(&self) -> f32 {
        self.model.hyper.beta
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step
    }
}

/// Token-autoregressive transformer baseline and judge.
#[pyclass]
struct TransformerLm {
    cfg: RunConfig,
    model: Transformer,
    state: TfTrainerState,
}

#[pymethods]
impl TransformerLm {
    #[new]
    #[pyo3(signature = (config_toml=""))]
    fn new(config_toml: &str) -> PyResult<Self> {
        let mut cfg = RunConfig::from_toml(config_toml).map_err(value_err)?;
        cfg.model = ModelKind::Transformer;
        let model = Transformer::new(cfg.tf_config(), cfg.seed).map_err(value_err)?;
        let state = TfTrainerState::fresh(
            &model,
            cfg.lr,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
            cfg.seed,
        );
        Ok(TransformerLm { cfg, model, state })
    }

    /// Train on raw corpus bytes; returns (step, nll, ppl) tuples.
    fn train(&mut self, corpus: &[u8], steps: u64) -> PyResult<Vec<(u64, f64, f64)>> {
        let blocks = blocks_from_bytes(&self.cfg, corpus)?;
        let rows = self
            .model
            .train(&blocks, &mut self.state, steps, 0, self.cfg.val_blocks)
            .map_err(runtime_err)?;
        Ok(rows.iter().map(|r| (r.step, r.nll_per_token, r.ppl)).collect())
    }

    #[pyo3(signature = (prompt, l_gen, temperature=0.9, seed=0))]
    fn generate<'py>(
        &self,
        py: Python<'py>,
        prompt: &[u8],
        l_gen: usize,
        temperature: f32,
        seed: u64,
    ) -> PyResult<Bound<'py, PyBytes>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = self
            .model
            .generate(&gpvlm::data::tokenize(prompt), l_gen, temperature, &mut rng)
            .map_err(runtime_err)?;
        Ok(PyBytes::new(py, &gpvlm::data::detokenize(&tokens)))
    }

    /// Teacher-forced scoring: (mean nll, per-token probabilities).
    fn score(&self, text: &[u8]) -> PyResult<(f64, Vec<f64>)> {
        self.model.score(&gpvlm::data::tokenize(text)).map_err(runtime_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(path, &snapshot_tf(&self.cfg, &self.model, &self.state))
            .map_err(runtime_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = load_checkpoint(path).map_err(value_err)?;
        let (cfg, model, state) = restore_tf(&ck).map_err(value_err)?;
        Ok(TransformerLm { cfg, model, state })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step
    }
}

#[pymodule]
fn gpvlm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(sample_ar_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(sample_nonar_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(logdensity_gp, m)?)?;
    m.add_function(wrap_pyfunction!(logdensity_diag, m)?)?;
    m.add_function(wrap_pyfunction!(kl_posterior_to_gp, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_autocorr, m)?)?;
    m.add_function(wrap_pyfunction!(step_norm_stats, m)?)?;
    m.add_function(wrap_pyfunction!(rep_n, m)?)?;
    m.add_function(wrap_pyfunction!(consec_frac, m)?)?;
    m.add_function(wrap_pyfunction!(loop_detect, m)?)?;
    m.add_function(wrap_pyfunction!(rare_frac, m)?)?;
    m.add_class::<GpVae>()?;
    m.add_class::<TransformerLm>()?;
    Ok(())
}
