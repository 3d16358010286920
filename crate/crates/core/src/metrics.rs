//! Latent-space and text-space diagnostics: step norms, lag-k cosine
//! autocorrelation, prior log-densities, n-gram repetition, consecutive
//! repeats, loop detection, rare-token fraction, and report aggregation.

use crate::gp::{logdensity_diag, logdensity_gp, GpError, KernelConfig, LatentTrajectory};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Gp(#[from] GpError),
}

/// Mean cosine similarity between latent steps `k` apart, pooled over all
/// `(t, t+k)` pairs within the trajectory. Pairs where either vector is zero
/// contribute 0.
pub fn cosine_autocorr(z: &LatentTrajectory, k: usize) -> Result<f64, MetricError> {
    if k < 1 || k >= z.t {
        return Err(MetricError::Contract(format!("lag {k} out of range for T={}", z.t)));
    }
    let mut acc = 0.0f64;
    for t in 0..z.t - k {
        acc += cosine(z.step(t), z.step(t + k));
    }
    Ok(acc / (z.t - k) as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean and population std of the per-step Euclidean norm `||z_t - z_{t-1}||`.
pub fn step_norm_stats(z: &LatentTrajectory) -> Result<(f64, f64), MetricError> {
    if z.t < 2 {
        return Err(MetricError::Contract("step norms need T >= 2".into()));
    }
    let norms: Vec<f64> = (1..z.t)
        .map(|t| {
            z.step(t)
                .iter()
                .zip(z.step(t - 1))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(mean_std(&norms))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Duplicate n-gram fraction: `1 - distinct/total`.
pub fn rep_n(tokens: &[u32], n: usize) -> Result<f64, MetricError> {
    if n < 1 || tokens.len() < n {
        return Err(MetricError::Contract(format!(
            "rep_{n} needs at least {n} tokens, got {}",
            tokens.len()
        )));
    }
    let total = tokens.len() - n + 1;
    let distinct: HashSet<&[u32]> = tokens.windows(n).collect();
    Ok(1.0 - distinct.len() as f64 / total as f64)
}

/// Fraction of positions that repeat the previous token.
pub fn consec_frac(tokens: &[u32]) -> Result<f64, MetricError> {
    if tokens.len() < 2 {
        return Err(MetricError::Contract("consec_frac needs at least 2 tokens".into()));
    }
    let hits = tokens.windows(2).filter(|w| w[0] == w[1]).count();
    Ok(hits as f64 / (tokens.len() - 1) as f64)
}

/// Loop diagnostics.
///
/// `catastrophic` is true iff some period `p <= l_max` has a p-periodic
/// suffix of length >= 2p reaching the final token. `loop_cover` is the
/// fraction of positions inside maximal p-periodic runs of length >= 2p
/// (partial trailing periods included).
pub fn loop_detect(tokens: &[u32], l_max: usize) -> (f64, bool) {
    let n = tokens.len();
    if n < 2 || l_max == 0 {
        return (0.0, false);
    }
    let mut covered = vec![false; n];
    let mut catastrophic = false;
    for p in 1..=l_max.min(n - 1) {
        // trailing run of matches s[i] == s[i-p]
        let mut tail = 0usize;
        for i in (p..n).rev() {
            if tokens[i] == tokens[i - p] {
                tail += 1;
            } else {
                break;
            }
        }
        if tail >= p {
            catastrophic = true;
        }
        // maximal runs of consecutive matches anywhere
        let mut q = 0usize;
        while q + p < n {
            if tokens[q] == tokens[q + p] {
                let start = q;
                while q + p < n && tokens[q] == tokens[q + p] {
                    q += 1;
                }
                let span = (q - start) + p; // periodic segment [start, start+span)
                if span >= 2 * p {
                    for c in covered.iter_mut().skip(start).take(span) {
                        *c = true;
                    }
                }
            } else {
                q += 1;
            }
        }
    }
    let cover = covered.iter().filter(|&&c| c).count() as f64 / n as f64;
    (cover, catastrophic)
}

/// Fraction of tokens whose judge probability is strictly below `threshold`.
pub fn rare_frac(tokens: &[u32], judge_probs: &[f64], threshold: f64) -> Result<f64, MetricError> {
    if tokens.len() != judge_probs.len() {
        return Err(MetricError::Contract(format!(
            "{} tokens but {} probabilities",
            tokens.len(),
            judge_probs.len()
        )));
    }
    if tokens.is_empty() {
        return Err(MetricError::Contract("rare_frac needs at least 1 token".into()));
    }
    let rare = judge_probs.iter().filter(|&&p| p < threshold).count();
    Ok(rare as f64 / tokens.len() as f64)
}

pub const RARE_THRESHOLD: f64 = 1e-4;

/// Aggregated latent diagnostics for a batch of trajectories. Step-norm and
/// cosine statistics are per-trajectory means summarized across the batch;
/// log-densities are per-trajectory totals averaged across the batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentDiagnostics {
    pub step_norm_mean: f64,
    pub step_norm_std: f64,
    pub cos_mean: f64,
    pub cos_std: f64,
    pub corr_by_lag: BTreeMap<u32, f64>,
    pub logp_gp_mean: f64,
    pub logp_diag_mean: f64,
}

pub fn latent_report(
    zs: &[LatentTrajectory],
    cfg: &KernelConfig,
) -> Result<LatentDiagnostics, MetricError> {
    if zs.is_empty() {
        return Err(MetricError::Contract("latent_report needs at least one trajectory".into()));
    }
    let mut step_means = Vec::with_capacity(zs.len());
    let mut cos1 = Vec::with_capacity(zs.len());
    let mut logp_gp = 0.0f64;
    let mut logp_diag = 0.0f64;
    let mut by_lag: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for z in zs {
        let (m, _) = step_norm_stats(z)?;
        step_means.push(m);
        cos1.push(cosine_autocorr(z, 1)?);
        for k in 1..=10usize.min(z.t - 1) {
            by_lag.entry(k as u32).or_default().push(cosine_autocorr(z, k)?);
        }
        logp_gp += logdensity_gp(cfg, z)?;
        logp_diag += logdensity_diag(cfg, z)?;
    }
    let n = zs.len() as f64;
    let (step_norm_mean, step_norm_std) = mean_std(&step_means);
    let (cos_mean, cos_std) = mean_std(&cos1);
    let corr_by_lag =
        by_lag.into_iter().map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64)).collect();
    Ok(LatentDiagnostics {
        step_norm_mean,
        step_norm_std,
        cos_mean,
        cos_std,
        corr_by_lag,
        logp_gp_mean: logp_gp / n,
        logp_diag_mean: logp_diag / n,
    })
}

/// Aggregated text diagnostics for a batch of generated sequences. Judge
/// fields are present only when a judge scorer was supplied.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextDiagnostics {
    pub rep2: f64,
    pub rep3: f64,
    pub consec: f64,
    pub loop_frac: f64,
    pub cat_frac: f64,
    pub rare_frac: Option<f64>,
    pub nll_judge: Option<f64>,
    pub ppl_judge: Option<f64>,
}

/// Teacher-forced scorer: returns (mean nll in nats/token, per-token
/// probability of each realized token).
pub type JudgeFn<'a> = dyn Fn(&[u32]) -> (f64, Vec<f64>) + 'a;

pub fn text_report(
    sequences: &[Vec<u32>],
    judge: Option<&JudgeFn>,
    l_max: usize,
) -> Result<TextDiagnostics, MetricError> {
    if sequences.is_empty() {
        return Err(MetricError::Contract("text_report needs at least one sequence".into()));
    }
    let n = sequences.len() as f64;
    let (mut rep2, mut rep3, mut consec, mut cover) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut cats = 0usize;
    for s in sequences {
        rep2 += rep_n(s, 2)?;
        rep3 += rep_n(s, 3)?;
        consec += consec_frac(s)?;
        let (c, cat) = loop_detect(s, l_max);
        cover += c;
        cats += cat as usize;
    }
    let (mut rare, mut nll) = (None, None);
    if let Some(j) = judge {
        let mut rare_hits = 0usize;
        let mut total_tokens = 0usize;
        let mut nll_acc = 0.0f64;
        for s in sequences {
            let (seq_nll, probs) = j(s);
            rare_hits += probs.iter().filter(|&&p| p < RARE_THRESHOLD).count();
            total_tokens += probs.len();
            nll_acc += seq_nll;
        }
        rare = Some(rare_hits as f64 / total_tokens.max(1) as f64);
        nll = Some(nll_acc / n);
    }
    Ok(TextDiagnostics {
        rep2: rep2 / n,
        rep3: rep3 / n,
        consec: consec / n,
        loop_frac: cover / n,
        cat_frac: cats as f64 / n,
        rare_frac: rare,
        nll_judge: nll,
        ppl_judge: nll.map(f64::exp),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::TrajectoryMode;
    use proptest::prelude::*;

    fn traj(values: Vec<f64>, t: usize, d_z: usize) -> LatentTrajectory {
        LatentTrajectory::new(values, t, d_z, TrajectoryMode::Posterior)
    }

    /// Quantifier-literal oracle for `loop_detect`: O(L^2 * L_max) scan over
    /// all starts and periods.
    fn loop_detect_brute(tokens: &[u32], l_max: usize) -> (f64, bool) {
        let n = tokens.len();
        if n < 2 || l_max == 0 {
            return (0.0, false);
        }
        let mut covered = vec![false; n];
        let mut catastrophic = false;
        for p in 1..=l_max.min(n - 1) {
            // suffix rule: any length >= 2p suffix that is p-periodic to the end
            for len in (2 * p)..=n {
                let start = n - len;
                if (start + p..n).all(|i| tokens[i] == tokens[i - p]) {
                    catastrophic = true;
                }
            }
            // coverage: maximal periodic segment from every start
            for start in 0..n {
                let mut end = start + p; // segment [start, end) is p-periodic
                if end > n {
                    break;
                }
                while end < n && tokens[end] == tokens[end - p] {
                    end += 1;
                }
                if end - start >= 2 * p {
                    for c in covered.iter_mut().take(end).skip(start) {
                        *c = true;
                    }
                }
            }
        }
        (covered.iter().filter(|&&c| c).count() as f64 / n as f64, catastrophic)
    }

    #[test]
    fn cosine_constant_trajectory_is_one() {
        let z = traj(vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 3, 2);
        for k in 1..3 {
            assert!((cosine_autocorr(&z, k).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_alternating_signs() {
        let v = [1.0, -0.5, 2.0];
        let mut vals = Vec::new();
        for t in 0..4 {
            let s = if t % 2 == 0 { 1.0 } else { -1.0 };
            vals.extend(v.iter().map(|x| x * s));
        }
        let z = traj(vals, 4, 3);
        assert!((cosine_autocorr(&z, 1).unwrap() + 1.0).abs() < 1e-12);
        assert!((cosine_autocorr(&z, 2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_lag_out_of_range_errors() {
        let z = traj(vec![1.0, 2.0], 2, 1);
        assert!(cosine_autocorr(&z, 2).is_err());
        assert!(cosine_autocorr(&z, 0).is_err());
    }

    #[test]
    fn cosine_zero_vectors_contribute_zero() {
        let z = traj(vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0], 3, 2);
        // pairs: (0, z1) -> 0, (z1, z2) -> 1; mean = 0.5
        assert!((cosine_autocorr(&z, 1).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cosine_invariant_to_scale_and_rotation() {
        let mut vals = Vec::new();
        for t in 0..6 {
            vals.extend([(t as f64).sin() + 0.3, (t as f64 * 0.7).cos(), 0.2 * t as f64 - 0.5]);
        }
        let z = traj(vals.clone(), 6, 3);
        let base = cosine_autocorr(&z, 2).unwrap();

        let scaled = traj(vals.iter().map(|v| v * 7.3).collect(), 6, 3);
        assert!((cosine_autocorr(&scaled, 2).unwrap() - base).abs() < 1e-12);

        // rotate all steps by one fixed orthogonal matrix (Givens about two axes)
        let (c1, s1) = (0.6f64, 0.8f64);
        let rotated: Vec<f64> = (0..6)
            .flat_map(|t| {
                let v = &vals[t * 3..(t + 1) * 3];
                vec![c1 * v[0] - s1 * v[1], s1 * v[0] + c1 * v[1], v[2]]
            })
            .collect();
        let zr = traj(rotated, 6, 3);
        assert!((cosine_autocorr(&zr, 2).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn step_norms_basics() {
        let z = traj(vec![1.0, 1.0, 1.0], 3, 1);
        assert_eq!(step_norm_stats(&z).unwrap(), (0.0, 0.0));
        let z = traj(vec![0.0, 3.0], 2, 1);
        assert_eq!(step_norm_stats(&z).unwrap(), (3.0, 0.0));
        let z = traj(vec![1.0], 1, 1);
        assert!(step_norm_stats(&z).is_err());
    }

    #[test]
    fn rep_n_cases() {
        let distinct: Vec<u32> = (0..10).collect();
        assert_eq!(rep_n(&distinct, 2).unwrap(), 0.0);
        let same = vec![5u32; 12];
        // single token repeated L times: 1 - 1/(L-n+1)
        assert!((rep_n(&same, 2).unwrap() - (1.0 - 1.0 / 11.0)).abs() < 1e-12);
        assert!((rep_n(&same, 3).unwrap() - (1.0 - 1.0 / 10.0)).abs() < 1e-12);
        assert!(rep_n(&[1], 2).is_err());
    }

    #[test]
    fn consec_cases() {
        let s = |t: &str| -> Vec<u32> { t.bytes().map(|b| b as u32).collect() };
        assert_eq!(consec_frac(&s("aaaa")).unwrap(), 1.0);
        assert_eq!(consec_frac(&s("abab")).unwrap(), 0.0);
        assert!((consec_frac(&s("aabb")).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(consec_frac(&s("a")).is_err());
    }

    #[test]
    fn loop_detect_examples() {
        let s = |t: &str| -> Vec<u32> { t.bytes().map(|b| b as u32).collect() };
        let (cover, cat) = loop_detect(&s("abcabcabc"), 3);
        assert!(cat);
        assert_eq!(cover, 1.0);

        let increasing: Vec<u32> = (0..20).collect();
        assert_eq!(loop_detect(&increasing, 8), (0.0, false));

        let (cover, cat) = loop_detect(&s("xyzabab"), 2);
        assert!(cat, "suffix abab is 2-periodic to the end");
        assert!((cover - 4.0 / 7.0).abs() < 1e-12, "cover {cover}");
    }

    #[test]
    fn loop_detect_matches_brute_force_on_handpicked() {
        let cases: &[(&[u32], usize)] = &[
            (&[1, 1, 1, 1], 1),
            (&[1, 2, 1, 2, 1], 2),
            (&[3, 1, 2, 1, 2, 9], 2),
            (&[0, 1, 2, 0, 1, 2, 0, 1], 3),
            (&[5, 5, 5, 1, 2, 1, 2], 4),
        ];
        for &(toks, lm) in cases {
            assert_eq!(loop_detect(toks, lm), loop_detect_brute(toks, lm), "{toks:?} lm={lm}");
        }
    }

    proptest! {
        #[test]
        fn loop_detect_matches_brute_force(
            toks in proptest::collection::vec(0u32..6, 2..64),
            l_max in 1usize..10,
        ) {
            prop_assert_eq!(loop_detect(&toks, l_max), loop_detect_brute(&toks, l_max));
        }

        #[test]
        fn repetition_metrics_invariant_under_relabeling(
            toks in proptest::collection::vec(0u32..8, 4..48),
            shift in 1u32..100,
        ) {
            // bijective renaming: fixed permutation of the token alphabet
            let renamed: Vec<u32> = toks.iter().map(|&t| (t * 13 + shift) % 104729).collect();
            prop_assert_eq!(rep_n(&toks, 2).unwrap(), rep_n(&renamed, 2).unwrap());
            prop_assert_eq!(rep_n(&toks, 3).unwrap(), rep_n(&renamed, 3).unwrap());
            prop_assert_eq!(consec_frac(&toks).unwrap(), consec_frac(&renamed).unwrap());
            prop_assert_eq!(loop_detect(&toks, 8), loop_detect(&renamed, 8));
        }
    }

    #[test]
    fn rare_frac_cases() {
        let toks = vec![1u32, 2, 3];
        assert_eq!(rare_frac(&toks, &[1.0, 1.0, 1.0], 1e-4).unwrap(), 0.0);
        assert_eq!(rare_frac(&toks, &[0.0, 0.0, 0.0], 1e-4).unwrap(), 1.0);
        // boundary is strict
        assert_eq!(rare_frac(&toks, &[1e-4, 1e-4, 1e-4], 1e-4).unwrap(), 0.0);
        assert!(rare_frac(&toks, &[0.5], 1e-4).is_err());
    }

    #[test]
    fn rep2_low_for_random_bytes() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        // birthday bound: 63 bigrams over 65536 possibilities collide rarely
        for _ in 0..20 {
            let toks: Vec<u32> = (0..64).map(|_| rng.random_range(0..256u32)).collect();
            assert!(rep_n(&toks, 2).unwrap() < 0.05);
        }
    }

    #[test]
    fn latent_report_single_constant_trajectory() {
        let cfg = KernelConfig::default();
        let z = traj(vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 3, 2);
        let rep = latent_report(&[z], &cfg).unwrap();
        assert_eq!(rep.step_norm_mean, 0.0);
        assert_eq!(rep.step_norm_std, 0.0);
        assert!((rep.cos_mean - 1.0).abs() < 1e-12);
        assert!((rep.corr_by_lag[&1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn latent_report_matches_scalar_recomputation() {
        let cfg = KernelConfig::default();
        let zs: Vec<LatentTrajectory> = (0..3)
            .map(|s| crate::gp::sample_ar_trajectory(&cfg, 12, 3, None, s).unwrap())
            .collect();
        let rep = latent_report(&zs, &cfg).unwrap();
        let mut step_means = Vec::new();
        let mut gp_acc = 0.0;
        for z in &zs {
            step_means.push(step_norm_stats(z).unwrap().0);
            gp_acc += logdensity_gp(&cfg, z).unwrap();
        }
        let want_mean = step_means.iter().sum::<f64>() / 3.0;
        assert!((rep.step_norm_mean - want_mean).abs() < 1e-12);
        assert!((rep.logp_gp_mean - gp_acc / 3.0).abs() < 1e-9);
    }

    #[test]
    fn text_report_counting() {
        let looped: Vec<u32> = [1u32, 2, 3].repeat(8);
        let distinct: Vec<u32> = (0..24).collect();
        let report =
            text_report(&[looped.clone(), looped, distinct.clone(), distinct], None, 8).unwrap();
        assert_eq!(report.cat_frac, 0.5);
        assert!(report.rare_frac.is_none());

        let all_loops: Vec<Vec<u32>> = (0..4).map(|_| [7u32, 8].repeat(12)).collect();
        assert_eq!(text_report(&all_loops, None, 8).unwrap().cat_frac, 1.0);

        let none: Vec<Vec<u32>> = (0..4).map(|i| (i..i + 24).collect()).collect();
        assert_eq!(text_report(&none, None, 8).unwrap().cat_frac, 0.0);
    }

    proptest! {
        #[test]
        fn text_report_fields_stay_in_range(
            seqs in proptest::collection::vec(
                proptest::collection::vec(0u32..6, 4..40), 1..6),
            l_max in 1usize..12,
        ) {
            let n = seqs.len();
            let judge = |toks: &[u32]| -> (f64, Vec<f64>) {
                (1.0, toks.iter().map(|&t| 1.0 / (t as f64 + 2.0)).collect())
            };
            let rep = text_report(&seqs, Some(&judge), l_max).unwrap();
            for (name, v) in [
                ("rep2", rep.rep2),
                ("rep3", rep.rep3),
                ("consec", rep.consec),
                ("loop_frac", rep.loop_frac),
                ("cat_frac", rep.cat_frac),
                ("rare_frac", rep.rare_frac.unwrap()),
            ] {
                prop_assert!((0.0..=1.0).contains(&v), "{name} = {v}");
            }
            // cat_frac * n must be a whole count of sequences
            let count = rep.cat_frac * n as f64;
            prop_assert!((count - count.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn text_report_judge_fields() {
        let seqs = vec![vec![1u32, 2, 3, 4], vec![5u32, 6, 7, 8]];
        let judge = |toks: &[u32]| -> (f64, Vec<f64>) {
            (2.0, toks.iter().map(|&t| if t > 4 { 1e-6 } else { 0.5 }).collect())
        };
        let rep = text_report(&seqs, Some(&judge), 4).unwrap();
        assert_eq!(rep.rare_frac, Some(0.5));
        assert_eq!(rep.nll_judge, Some(2.0));
        assert!((rep.ppl_judge.unwrap() - 2.0f64.exp()).abs() < 1e-12);
    }
}
