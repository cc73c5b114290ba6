// SPDX-License-Identifier: MIT OR Apache-2.0

//! Effect sizes, word-stratified bootstrap, and rank tests.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{LexError, Result};
use crate::rng::stream_rng;

pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_SEED: u64 = 42;

/// Largest n for which the signed-rank p-value is enumerated exactly.
pub const WILCOXON_EXACT_MAX: usize = 25;
/// Largest pooled sample size for which Mann-Whitney is enumerated exactly.
pub const MANN_WHITNEY_EXACT_MAX: usize = 30;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; 0 for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Linear-interpolation quantile of sorted data (R type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Count, mean and unbiased variance of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    pub var: f64,
}

impl Moments {
    pub fn of(xs: &[f64]) -> Self {
        Moments {
            n: xs.len(),
            mean: if xs.is_empty() { 0.0 } else { mean(xs) },
            var: sample_variance(xs),
        }
    }
}

/// `(mean_a - mean_b) / s_pooled` with
/// `s_pooled = sqrt(((n_a-1) s_a^2 + (n_b-1) s_b^2) / (n_a + n_b - 2))`.
///
/// When the pooled deviation vanishes the result is 0 for equal means and
/// signed infinity otherwise.
pub fn standardized_difference(a: Moments, b: Moments) -> Result<f64> {
    if a.n < 2 || b.n < 2 {
        return Err(LexError::InvalidInput(format!(
            "Cohen's d needs at least 2 values per group (got {} and {})",
            a.n, b.n
        )));
    }
    let pooled_var =
        ((a.n - 1) as f64 * a.var + (b.n - 1) as f64 * b.var) / (a.n + b.n - 2) as f64;
    let sd = pooled_var.max(0.0).sqrt();
    let diff = a.mean - b.mean;
    let scale = a.mean.abs().max(b.mean.abs()).max(f64::MIN_POSITIVE);
    if sd <= 1e-12 * scale {
        if diff.abs() <= 1e-12 * scale {
            return Ok(0.0);
        }
        return Ok(f64::INFINITY.copysign(diff));
    }
    Ok(diff / sd)
}

/// Cohen's d: `|mean(a) - mean(b)|` over the pooled standard deviation.
/// Zero pooled deviation with unequal means yields `f64::INFINITY`.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<f64> {
    standardized_difference(Moments::of(a), Moments::of(b)).map(f64::abs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub level: f64,
    pub n_resamples: usize,
    pub lo: f64,
    pub hi: f64,
    pub point: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub seed: u64,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_resamples: DEFAULT_RESAMPLES,
            seed: DEFAULT_SEED,
            level: DEFAULT_LEVEL,
        }
    }
}

/// Indices drawn for resample `r`: `n` uniform draws with replacement from
/// stream `r` of `seed`.
pub fn resample_indices(seed: u64, r: usize, n: usize) -> Vec<usize> {
    let mut rng = stream_rng(seed, r as u64);
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Percentile bootstrap of an arbitrary statistic over `n_items` resampling
/// units. `stat` receives the drawn unit indices. Resamples whose statistic
/// is not finite are dropped from the percentile computation. The interval
/// is widened if needed so that it contains `point`.
pub fn bootstrap_with<F>(n_items: usize, cfg: &BootstrapConfig, point: f64, stat: F) -> Result<BootstrapCI>
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    if n_items == 0 {
        return Err(LexError::InvalidInput("bootstrap over zero units".into()));
    }
    if cfg.n_resamples == 0 {
        return Err(LexError::InvalidInput("bootstrap needs at least one resample".into()));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(LexError::InvalidInput(format!("CI level {} outside (0, 1)", cfg.level)));
    }
    let mut values: Vec<f64> = (0..cfg.n_resamples)
        .into_par_iter()
        .map(|r| stat(&resample_indices(cfg.seed, r, n_items)))
        .collect();
    values.retain(|v| v.is_finite());
    if values.is_empty() {
        return Err(LexError::Undefined("no resample produced a finite statistic".into()));
    }
    values.sort_by(f64::total_cmp);
    let alpha = 1.0 - cfg.level;
    let lo = quantile_sorted(&values, alpha / 2.0);
    let hi = quantile_sorted(&values, 1.0 - alpha / 2.0);
    Ok(BootstrapCI {
        level: cfg.level,
        n_resamples: cfg.n_resamples,
        lo: lo.min(point),
        hi: hi.max(point),
        point,
        seed: cfg.seed,
    })
}

fn mean_of_indexed(values: &[f64], idx: &[usize]) -> f64 {
    let mut s = 0.0;
    for &i in idx {
        s += values[i];
    }
    s / idx.len() as f64
}

/// Word-stratified bootstrap CI of the unweighted cross-word mean. Words are
/// taken in map (lemma) order.
pub fn bootstrap_ci(per_word: &BTreeMap<String, f64>, n_resamples: usize, seed: u64, level: f64) -> Result<BootstrapCI> {
    let values: Vec<f64> = per_word.values().copied().collect();
    if values.is_empty() {
        return Err(LexError::InvalidInput("bootstrap over zero words".into()));
    }
    let all: Vec<usize> = (0..values.len()).collect();
    let point = mean_of_indexed(&values, &all);
    let cfg = BootstrapConfig {
        n_resamples,
        seed,
        level,
    };
    bootstrap_with(values.len(), &cfg, point, |idx| mean_of_indexed(&values, idx))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    Exact,
    NormalApprox,
    /// No informative data (all differences zero); p fixed at 1.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub method: PMethod,
}

/// Midranks (1-based) of `values`, plus the tie-group sizes.
fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

fn two_sided(lower: f64, upper: f64) -> f64 {
    (2.0 * lower.min(upper)).min(1.0)
}

fn normal_two_sided(z: f64) -> f64 {
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

struct SignedRanks {
    /// Doubled midranks of |d|, so every rank is an integer.
    doubled: Vec<u64>,
    ties: Vec<usize>,
    /// Doubled W+.
    w_plus2: u64,
}

fn signed_ranks(x: &[f64], y: &[f64]) -> Result<SignedRanks> {
    if x.len() != y.len() {
        return Err(LexError::DimensionMismatch(format!(
            "paired samples of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = midranks(&abs);
    let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
    let w_plus2 = diffs
        .iter()
        .zip(&doubled)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    Ok(SignedRanks {
        doubled,
        ties,
        w_plus2,
    })
}

fn exact_signed_rank_p(sr: &SignedRanks) -> f64 {
    let total: u64 = sr.doubled.iter().sum();
    // counts[s] = number of sign assignments with doubled W+ = s.
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in &sr.doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let all = 2f64.powi(sr.doubled.len() as i32);
    let w = sr.w_plus2 as usize;
    let lower: f64 = counts[..=w].iter().sum::<f64>() / all;
    let upper: f64 = counts[w..].iter().sum::<f64>() / all;
    two_sided(lower, upper)
}

fn normal_signed_rank_p(sr: &SignedRanks) -> f64 {
    let n = sr.doubled.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let tie_term: f64 = sr.ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term;
    if var <= 0.0 {
        return 1.0;
    }
    let w = sr.w_plus2 as f64 / 2.0;
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    normal_two_sided(z)
}

fn wilcoxon_with(x: &[f64], y: &[f64], exact: Option<bool>) -> Result<TestResult> {
    let sr = signed_ranks(x, y)?;
    let n = sr.doubled.len();
    if n == 0 {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
            n: 0,
            method: PMethod::Degenerate,
        });
    }
    if n < 5 {
        return Err(LexError::InvalidInput(format!(
            "signed-rank test needs at least 5 nonzero differences (got {n})"
        )));
    }
    let use_exact = exact.unwrap_or(n <= WILCOXON_EXACT_MAX);
    let (p_value, method) = if use_exact {
        (exact_signed_rank_p(&sr), PMethod::Exact)
    } else {
        (normal_signed_rank_p(&sr), PMethod::NormalApprox)
    };
    Ok(TestResult {
        statistic: sr.w_plus2 as f64 / 2.0,
        p_value,
        n,
        method,
    })
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped; if every difference is zero, p = 1. Exact for up to
/// [`WILCOXON_EXACT_MAX`] nonzero pairs, normal approximation with tie and
/// continuity correction above.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<TestResult> {
    wilcoxon_with(x, y, None)
}

/// Signed-rank test forced to the exact null distribution.
pub fn wilcoxon_exact(x: &[f64], y: &[f64]) -> Result<TestResult> {
    wilcoxon_with(x, y, Some(true))
}

/// Signed-rank test forced to the normal approximation.
pub fn wilcoxon_normal(x: &[f64], y: &[f64]) -> Result<TestResult> {
    wilcoxon_with(x, y, Some(false))
}

/// Holm step-down adjusted p-values, in input order.
pub fn holm_bonferroni(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        let candidate = ((m - rank) as f64 * p_values[i].clamp(0.0, 1.0)).min(1.0);
        running = running.max(candidate);
        adjusted[i] = running;
    }
    adjusted
}

fn mann_whitney_with(x: &[f64], y: &[f64], exact: Option<bool>) -> Result<TestResult> {
    if x.is_empty() || y.is_empty() {
        return Err(LexError::InvalidInput("Mann-Whitney needs nonempty samples".into()));
    }
    let (n1, n2) = (x.len(), y.len());
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum_x: f64 = ranks[..n1].iter().sum();
    let u = rank_sum_x - (n1 * (n1 + 1)) as f64 / 2.0;
    let n = n1 + n2;
    let use_exact = exact.unwrap_or(n <= MANN_WHITNEY_EXACT_MAX);
    let (p_value, method) = if use_exact {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        // ways[k][s]: subsets of size k with doubled rank sum s.
        let mut ways = vec![vec![0.0f64; total + 1]; n1 + 1];
        ways[0][0] = 1.0;
        for &r in &doubled {
            for k in (1..=n1).rev() {
                let (head, tail) = ways.split_at_mut(k);
                let prev = &head[k - 1];
                let cur = &mut tail[0];
                for s in (r..=total).rev() {
                    if prev[s - r] != 0.0 {
                        cur[s] += prev[s - r];
                    }
                }
            }
        }
        let observed = (2.0 * rank_sum_x).round() as usize;
        let dist = &ways[n1];
        let all: f64 = dist.iter().sum();
        let lower = dist[..=observed].iter().sum::<f64>() / all;
        let upper = dist[observed..].iter().sum::<f64>() / all;
        (two_sided(lower, upper), PMethod::Exact)
    } else {
        let (a, b, nf) = (n1 as f64, n2 as f64, n as f64);
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
        let var = a * b / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
        if var <= 0.0 {
            (1.0, PMethod::NormalApprox)
        } else {
            let z = ((u - a * b / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
            (normal_two_sided(z), PMethod::NormalApprox)
        }
    };
    Ok(TestResult {
        statistic: u,
        p_value,
        n,
        method,
    })
}

/// Two-sided Mann-Whitney U test. Pooled samples of up to
/// [`MANN_WHITNEY_EXACT_MAX`] use the exact permutation distribution of the
/// observed midranks; larger samples use the tie-corrected normal
/// approximation with continuity correction.
pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<TestResult> {
    mann_whitney_with(x, y, None)
}

pub fn mann_whitney_normal(x: &[f64], y: &[f64]) -> Result<TestResult> {
    mann_whitney_with(x, y, Some(false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn cohens_d_examples() {
        assert_abs_diff_eq!(cohens_d(&[0.5, 1.5], &[-0.5, 0.5]).unwrap(), 1.414_213_6, epsilon = 1e-4);
        assert_eq!(cohens_d(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap(), 0.0);
        assert_eq!(cohens_d(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), f64::INFINITY);
        assert_eq!(cohens_d(&[3.0, 3.0], &[3.0, 3.0]).unwrap(), 0.0);
        assert!(cohens_d(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn signed_difference_keeps_direction() {
        let d = standardized_difference(Moments::of(&[0.0, 0.0]), Moments::of(&[1.0, 1.0])).unwrap();
        assert_eq!(d, f64::NEG_INFINITY);
    }

    proptest! {
        #[test]
        fn cohens_d_symmetry_and_invariance(
            a in prop::collection::vec(-10.0f64..10.0, 2..12),
            b in prop::collection::vec(-10.0f64..10.0, 2..12),
            shift in -5.0f64..5.0,
            scale in 0.1f64..10.0,
        ) {
            let d = cohens_d(&a, &b).unwrap();
            prop_assume!(d.is_finite());
            let d_rev = cohens_d(&b, &a).unwrap();
            prop_assert!((d - d_rev).abs() <= 1e-9 * d.max(1.0));
            let t = |v: &[f64]| v.iter().map(|x| x * scale + shift).collect::<Vec<_>>();
            let d_t = cohens_d(&t(&a), &t(&b)).unwrap();
            prop_assert!((d - d_t).abs() <= 1e-7 * d.max(1.0));
        }

        #[test]
        fn holm_is_monotone_and_never_below_raw(p in prop::collection::vec(0.0f64..=1.0, 1..20)) {
            let adj = holm_bonferroni(&p);
            for (a, r) in adj.iter().zip(&p) {
                prop_assert!(*a >= *r && *a <= 1.0);
            }
            let mut pairs: Vec<(f64, f64)> = p.iter().copied().zip(adj.iter().copied()).collect();
            pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
            prop_assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }

    #[test]
    fn holm_examples() {
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&holm_bonferroni(&[0.01, 0.04]), &[0.02, 0.04]));
        assert!(close(&holm_bonferroni(&[0.5]), &[0.5]));
        // m=3: 3*0.01 = 0.03, 2*0.03 = 0.06, 1*0.04 -> carried up to 0.06.
        assert!(close(&holm_bonferroni(&[0.03, 0.01, 0.04]), &[0.06, 0.03, 0.06]));
        assert!(close(&holm_bonferroni(&[0.6, 0.9]), &[1.0, 1.0]));
    }

    #[test]
    fn bootstrap_degenerate_cases() {
        let same: BTreeMap<String, f64> = (0..7).map(|i| (format!("w{i}"), 0.5)).collect();
        let ci = bootstrap_ci(&same, 500, 42, 0.95).unwrap();
        assert_eq!((ci.lo, ci.point, ci.hi), (0.5, 0.5, 0.5));

        let single: BTreeMap<String, f64> = [("w".to_string(), 0.25)].into();
        let ci = bootstrap_ci(&single, 100, 1, 0.95).unwrap();
        assert_eq!((ci.lo, ci.point, ci.hi), (0.25, 0.25, 0.25));

        assert!(bootstrap_ci(&BTreeMap::new(), 100, 1, 0.95).is_err());
    }

    #[test]
    fn bootstrap_parallel_equals_single_thread() {
        let vals: BTreeMap<String, f64> = (0..30).map(|i| (format!("w{i:02}"), (i as f64).sin())).collect();
        let par = bootstrap_ci(&vals, 2000, 42, 0.95).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let ser = pool.install(|| bootstrap_ci(&vals, 2000, 42, 0.95).unwrap());
        assert_eq!(par.lo.to_bits(), ser.lo.to_bits());
        assert_eq!(par.hi.to_bits(), ser.hi.to_bits());
        assert!(par.lo <= par.point && par.point <= par.hi);
    }

    #[test]
    fn wilcoxon_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(wilcoxon_signed_rank(&x, &x).unwrap().p_value, 1.0);

        let x = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let y = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.method, PMethod::Exact);
        assert_abs_diff_eq!(r.p_value, 0.03125, epsilon = 1e-12);

        assert!(wilcoxon_signed_rank(&[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(wilcoxon_signed_rank(&[1.0; 6], &[0.0; 5]).is_err());
    }

    #[test]
    fn mann_whitney_examples() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_abs_diff_eq!(r.p_value, 1.0, epsilon = 0.01);
        let r = mann_whitney_u(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(r.p_value, 1.0);
        let r = mann_whitney_normal(&[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(r.p_value, 1.0);
        // All C(6,3) = 20 splits equally likely; the observed split is one of
        // two extremes.
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[10.0, 11.0, 12.0]).unwrap();
        assert_abs_diff_eq!(r.p_value, 0.1, epsilon = 1e-12);
        assert_eq!(r.statistic, 0.0);
    }

    #[test]
    fn quantile_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert_abs_diff_eq!(quantile_sorted(&v, 0.75), 3.25, epsilon = 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }
}
