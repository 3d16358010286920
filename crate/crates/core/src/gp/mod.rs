//! Stationary causal Gaussian-process prior over latent trajectories.
//!
//! Everything here runs in `f64`: joint log-densities span many orders of
//! magnitude and the sequential conditionals have to agree with the joint
//! Cholesky route to tight tolerances.
//!
//! The kernel is squared-exponential, `k(i,j) = variance *
//! exp(-(i-j)^2 / (2 lengthscale^2))` with `jitter` added on the diagonal.
//! Conditioning can be truncated to a sliding window of the last `W` steps;
//! stationarity makes the windowed factor reusable once the window is full,
//! so long generations cost O(L * W) after an O(W^3) setup.

mod chol;

pub use chol::LowerTri;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("invalid kernel config: {0}")]
    Config(String),
    #[error("numeric failure at step {step}: {msg}")]
    Numeric { step: usize, msg: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Stationary squared-exponential kernel over integer timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub variance: f64,
    pub lengthscale: f64,
    pub jitter: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { variance: 1.0, lengthscale: 3.0, jitter: 1e-5 }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.variance > 0.0) || !self.variance.is_finite() {
            return Err(GpError::Config(format!("variance must be > 0, got {}", self.variance)));
        }
        if !(self.lengthscale > 0.0) || !self.lengthscale.is_finite() {
            return Err(GpError::Config(format!(
                "lengthscale must be > 0, got {}",
                self.lengthscale
            )));
        }
        if !(self.jitter >= 0.0) || !self.jitter.is_finite() {
            return Err(GpError::Config(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        Ok(())
    }

    /// Covariance between two timesteps `lag` apart, without jitter.
    pub fn kernel_value(&self, lag: usize) -> f64 {
        let d = lag as f64;
        self.variance * (-d * d / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }

    /// Marginal (diagonal) variance `K_tt`.
    pub fn marginal_variance(&self) -> f64 {
        self.variance + self.jitter
    }
}

/// Dense T x T kernel matrix, row-major.
pub fn kernel_matrix(cfg: &KernelConfig, t: usize) -> Result<Vec<f64>, GpError> {
    cfg.validate()?;
    if t == 0 {
        return Err(GpError::Contract("kernel matrix needs T >= 1".into()));
    }
    let mut k = vec![0.0f64; t * t];
    for i in 0..t {
        for j in 0..t {
            let lag = i.abs_diff(j);
            k[i * t + j] = cfg.kernel_value(lag) + if i == j { cfg.jitter } else { 0.0 };
        }
    }
    Ok(k)
}

/// Provenance of a latent trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrajectoryMode {
    Ar,
    NonAr,
    Posterior,
}

/// A `T x d_z` latent trajectory in row-major `f64`.
#[derive(Debug, Clone)]
pub struct LatentTrajectory {
    pub values: Vec<f64>,
    pub t: usize,
    pub d_z: usize,
    pub mode: TrajectoryMode,
}

impl LatentTrajectory {
    pub fn new(values: Vec<f64>, t: usize, d_z: usize, mode: TrajectoryMode) -> Self {
        assert!(t >= 1 && d_z >= 1, "trajectory needs T >= 1 and d_z >= 1");
        assert_eq!(values.len(), t * d_z, "trajectory value count mismatch");
        LatentTrajectory { values, t, d_z, mode }
    }

    pub fn step(&self, ti: usize) -> &[f64] {
        &self.values[ti * self.d_z..(ti + 1) * self.d_z]
    }

    /// One latent dimension as a contiguous vector.
    pub fn dim(&self, d: usize) -> Vec<f64> {
        (0..self.t).map(|ti| self.values[ti * self.d_z + d]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Incremental Cholesky state for the causal conditionals.
///
/// The factor covers the kernel matrix of the active conditioning window
/// (all `t` seen steps, or the last `window` of them). Because the kernel is
/// stationary the factor depends only on the number of steps, never on the
/// latent values, so it can be advanced independently of any trajectory.
pub struct GpCache {
    cfg: KernelConfig,
    window: Option<usize>,
    chol: LowerTri,
    t: usize,
    /// Memoized (K_w^{-1} k_*, conditional variance) once the window is full.
    steady: Option<(Vec<f64>, f64)>,
}

impl GpCache {
    pub fn new(cfg: KernelConfig, window: Option<usize>) -> Result<Self, GpError> {
        cfg.validate()?;
        if window == Some(0) {
            return Err(GpError::Config("window must be >= 1 when set".into()));
        }
        Ok(GpCache { cfg, window, chol: LowerTri::empty(), t: 0, steady: None })
    }

    /// Number of prefix steps the cache currently conditions on.
    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn window(&self) -> Option<usize> {
        self.window
    }

    fn active(&self) -> usize {
        match self.window {
            Some(w) => self.t.min(w),
            None => self.t,
        }
    }

    /// Verify L L^T reproduces the active window's kernel matrix.
    pub fn factor_residual(&self) -> f64 {
        let w = self.active();
        if w == 0 {
            return 0.0;
        }
        let k = kernel_matrix(&self.cfg, w).expect("validated config");
        let recon = self.chol.reconstruct();
        k.iter().zip(&recon).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Extend the conditioning prefix by one step.
    pub fn advance(&mut self) -> Result<(), GpError> {
        let w = self.active();
        let saturated = matches!(self.window, Some(win) if w == win);
        if !saturated {
            // kernel row for the new index within the active window
            let row: Vec<f64> = (0..=w)
                .map(|j| self.cfg.kernel_value(w - j) + if j == w { self.cfg.jitter } else { 0.0 })
                .collect();
            self.chol.append_row(&row).map_err(|_| GpError::Numeric {
                step: self.t,
                msg: "kernel matrix not positive definite while growing the factor".into(),
            })?;
            self.steady = None;
        }
        self.t += 1;
        Ok(())
    }

    /// Conditional weights `a = K_w^{-1} k_*` over the active window and the
    /// conditional variance, shared by every latent dimension.
    fn weights_and_var(&mut self) -> Result<(&[f64], f64), GpError> {
        let w = self.active();
        if w == 0 {
            // no prefix: marginal
            self.steady = Some((Vec::new(), self.cfg.marginal_variance()));
            let (a, var) = self.steady.as_ref().unwrap();
            return Ok((a, *var));
        }
        if self.steady.is_none() {
            // k_* against window slot j at lag w - j
            let kvec: Vec<f64> = (0..w).map(|j| self.cfg.kernel_value(w - j)).collect();
            let mut u = kvec.clone();
            self.chol.solve_lower(&mut u);
            let var = self.cfg.marginal_variance() - u.iter().map(|x| x * x).sum::<f64>();
            if !(var > 0.0) || !var.is_finite() {
                return Err(GpError::Numeric {
                    step: self.t,
                    msg: format!("conditional variance not positive ({var})"),
                });
            }
            let mut a = u;
            self.chol.solve_lower_transpose(&mut a);
            self.steady = Some((a, var));
        }
        let (a, var) = self.steady.as_ref().unwrap();
        Ok((a, *var))
    }
}

/// Exact conditional `p(z_t | z_prefix)` for one latent dimension. The cache
/// must cover exactly `prefix.len()` steps; the variance is shared across
/// dimensions because they are independent under the same kernel.
pub fn gp_conditional(cache: &mut GpCache, prefix: &[f64]) -> Result<(f64, f64), GpError> {
    if cache.len() != prefix.len() {
        return Err(GpError::Contract(format!(
            "cache covers {} steps but prefix has {}",
            cache.len(),
            prefix.len()
        )));
    }
    let w = cache.active();
    let start = prefix.len() - w;
    let (a, var) = cache.weights_and_var()?;
    let mu: f64 = a.iter().zip(&prefix[start..]).map(|(ai, zi)| ai * zi).sum();
    Ok((mu, var))
}

/// Extend a (possibly empty) prefix of latent steps by `extra` AR draws from
/// the causal GP, conditioning on at most `window` past steps. Returns the
/// full `(prefix_len + extra) x d_z` values. Noise is drawn per step in
/// dimension order.
pub fn extend_ar<R: Rng>(
    cfg: &KernelConfig,
    window: Option<usize>,
    prefix: &[f64],
    d_z: usize,
    extra: usize,
    rng: &mut R,
) -> Result<Vec<f64>, GpError> {
    assert!(d_z >= 1, "d_z must be >= 1");
    assert_eq!(prefix.len() % d_z, 0, "prefix length not a multiple of d_z");
    let p = prefix.len() / d_z;
    let mut cache = GpCache::new(*cfg, window)?;
    for _ in 0..p {
        cache.advance()?;
    }
    let mut vals = prefix.to_vec();
    vals.reserve(extra * d_z);
    for step in p..p + extra {
        let w = cache.active();
        let (a, var) = cache.weights_and_var()?;
        let a = a.to_vec();
        let sd = var.sqrt();
        let start = step - w;
        for d in 0..d_z {
            let mut mu = 0.0f64;
            for (j, aj) in a.iter().enumerate() {
                mu += aj * vals[(start + j) * d_z + d];
            }
            let eps: f64 = rng.sample(StandardNormal);
            vals.push(mu + sd * eps);
        }
        cache.advance()?;
    }
    Ok(vals)
}

/// Independent draws `z_t ~ N(0, K_tt)` appended to a prefix.
pub fn extend_nonar<R: Rng>(
    cfg: &KernelConfig,
    prefix: &[f64],
    d_z: usize,
    extra: usize,
    rng: &mut R,
) -> Result<Vec<f64>, GpError> {
    cfg.validate()?;
    assert_eq!(prefix.len() % d_z, 0, "prefix length not a multiple of d_z");
    let sd = cfg.marginal_variance().sqrt();
    let mut vals = prefix.to_vec();
    vals.reserve(extra * d_z);
    for _ in 0..extra * d_z {
        let eps: f64 = rng.sample(StandardNormal);
        vals.push(sd * eps);
    }
    Ok(vals)
}

/// Sample a fresh AR trajectory. Deterministic given the seed.
pub fn sample_ar_trajectory(
    cfg: &KernelConfig,
    t: usize,
    d_z: usize,
    window: Option<usize>,
    seed: u64,
) -> Result<LatentTrajectory, GpError> {
    if t == 0 {
        return Err(GpError::Contract("trajectory needs T >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals = extend_ar(cfg, window, &[], d_z, t, &mut rng)?;
    Ok(LatentTrajectory::new(vals, t, d_z, TrajectoryMode::Ar))
}

/// Sample a fresh non-AR (independent) trajectory. Deterministic given the
/// seed.
pub fn sample_nonar_trajectory(
    cfg: &KernelConfig,
    t: usize,
    d_z: usize,
    seed: u64,
) -> Result<LatentTrajectory, GpError> {
    if t == 0 {
        return Err(GpError::Contract("trajectory needs T >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals = extend_nonar(cfg, &[], d_z, t, &mut rng)?;
    Ok(LatentTrajectory::new(vals, t, d_z, TrajectoryMode::NonAr))
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Joint log-density of the trajectory under the correlated GP prior, in
/// total nats over all steps and dimensions. One Cholesky of K is shared
/// across dimensions.
pub fn logdensity_gp(cfg: &KernelConfig, z: &LatentTrajectory) -> Result<f64, GpError> {
    let k = kernel_matrix(cfg, z.t)?;
    let l = LowerTri::factor(&k, z.t).map_err(|i| GpError::Numeric {
        step: i,
        msg: "kernel matrix not positive definite".into(),
    })?;
    let logdet = l.log_det();
    let mut total = -(z.d_z as f64) * 0.5 * (logdet + z.t as f64 * LN_2PI);
    for d in 0..z.d_z {
        let mut y = z.dim(d);
        l.solve_lower(&mut y);
        total -= 0.5 * y.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total)
}

/// Same joint log-density computed through the chain of sequential
/// conditionals (no windowing). Algebraically identical to `logdensity_gp`;
/// the pair is the module's central correctness check.
pub fn logdensity_gp_sequential(cfg: &KernelConfig, z: &LatentTrajectory) -> Result<f64, GpError> {
    let mut cache = GpCache::new(*cfg, None)?;
    let mut total = 0.0f64;
    let mut prefixes: Vec<Vec<f64>> = vec![Vec::with_capacity(z.t); z.d_z];
    for ti in 0..z.t {
        let w = cache.active();
        let (a, var) = cache.weights_and_var()?;
        let a = a.to_vec();
        for (d, prefix) in prefixes.iter_mut().enumerate() {
            let start = prefix.len() - w;
            let mu: f64 = a.iter().zip(&prefix[start..]).map(|(ai, zi)| ai * zi).sum();
            let x = z.values[ti * z.d_z + d];
            total += -0.5 * ((x - mu) * (x - mu) / var + var.ln() + LN_2PI);
            prefix.push(x);
        }
        cache.advance()?;
    }
    Ok(total)
}

/// Log-density under the independent prior with the same marginal variances,
/// `sum_{t,d} log N(z_t[d]; 0, K_tt)`.
pub fn logdensity_diag(cfg: &KernelConfig, z: &LatentTrajectory) -> Result<f64, GpError> {
    cfg.validate()?;
    let v = cfg.marginal_variance();
    let mut total = 0.0f64;
    for x in &z.values {
        total += -0.5 * (x * x / v + v.ln() + LN_2PI);
    }
    Ok(total)
}

/// Which prior the posterior KL is taken against.
pub enum KlPrior {
    /// Correlated GP prior with the full T x T kernel.
    Full { chol: LowerTri, kinv_diag: Vec<f64>, logdet: f64, t: usize },
    /// Independent prior with variance `K_tt` per step.
    Diagonal { var: f64, t: usize },
}

impl KlPrior {
    pub fn full(cfg: &KernelConfig, t: usize) -> Result<Self, GpError> {
        let k = kernel_matrix(cfg, t)?;
        let chol = LowerTri::factor(&k, t).map_err(|i| GpError::Numeric {
            step: i,
            msg: "kernel matrix not positive definite".into(),
        })?;
        let kinv_diag = chol.inverse_diagonal();
        let logdet = chol.log_det();
        Ok(KlPrior::Full { chol, kinv_diag, logdet, t })
    }

    pub fn diagonal(cfg: &KernelConfig, t: usize) -> Result<Self, GpError> {
        cfg.validate()?;
        Ok(KlPrior::Diagonal { var: cfg.marginal_variance(), t })
    }

    pub fn len(&self) -> usize {
        match self {
            KlPrior::Full { t, .. } | KlPrior::Diagonal { t, .. } => *t,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// KL(q || p) in total nats for a per-step factorized Gaussian posterior
    /// with the given means and variances (`t x d_z`, row-major), plus the
    /// gradients w.r.t. the means and w.r.t. log-variances.
    ///
    /// Per latent dimension with S = diag(s^2):
    ///   KL = 0.5 * ( tr(K^-1 S) + m^T K^-1 m - T + log det K - sum log s^2 )
    pub fn kl_with_grads(
        &self,
        means: &[f64],
        variances: &[f64],
        d_z: usize,
    ) -> Result<(f64, Vec<f64>, Vec<f64>), GpError> {
        let t = self.len();
        if means.len() != t * d_z || variances.len() != t * d_z {
            return Err(GpError::Contract(format!(
                "posterior shape mismatch: expected {t}x{d_z}"
            )));
        }
        if let Some(bad) = variances.iter().find(|v| !(**v > 0.0)) {
            return Err(GpError::Contract(format!("non-positive posterior variance {bad}")));
        }
        let mut kl = 0.0f64;
        let mut dmu = vec![0.0f64; t * d_z];
        let mut dlogvar = vec![0.0f64; t * d_z];
        match self {
            KlPrior::Full { chol, kinv_diag, logdet, .. } => {
                for d in 0..d_z {
                    let m: Vec<f64> = (0..t).map(|ti| means[ti * d_z + d]).collect();
                    let mut alpha = m.clone();
                    chol.solve(&mut alpha);
                    let quad: f64 = m.iter().zip(&alpha).map(|(a, b)| a * b).sum();
                    let mut tr = 0.0f64;
                    let mut logs = 0.0f64;
                    for ti in 0..t {
                        let s2 = variances[ti * d_z + d];
                        tr += kinv_diag[ti] * s2;
                        logs += s2.ln();
                        dlogvar[ti * d_z + d] = 0.5 * (kinv_diag[ti] * s2 - 1.0);
                        dmu[ti * d_z + d] = alpha[ti];
                    }
                    kl += 0.5 * (tr + quad - t as f64 + logdet - logs);
                }
            }
            KlPrior::Diagonal { var, .. } => {
                for i in 0..t * d_z {
                    let (m, s2) = (means[i], variances[i]);
                    kl += 0.5 * (s2 / var + m * m / var - 1.0 + var.ln() - s2.ln());
                    dmu[i] = m / var;
                    dlogvar[i] = 0.5 * (s2 / var - 1.0);
                }
            }
        }
        Ok((kl, dmu, dlogvar))
    }
}

/// KL from a factorized Gaussian posterior to the correlated GP prior, in
/// total nats.
pub fn kl_posterior_to_gp(
    means: &[f64],
    variances: &[f64],
    t: usize,
    d_z: usize,
    cfg: &KernelConfig,
) -> Result<f64, GpError> {
    let prior = KlPrior::full(cfg, t)?;
    let (kl, _, _) = prior.kl_with_grads(means, variances, d_z)?;
    Ok(kl)
}
