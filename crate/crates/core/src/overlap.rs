// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pairwise overlap metrics and per-condition aggregation.
//!
//! A neuron is *active* in a vector when its absolute activation is strictly
//! above the median absolute activation of that vector.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LexError, Result};
use crate::pairing::{Condition, PairSet};
use crate::stats::{self, BootstrapConfig};
use crate::store::{ActivationStore, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Jaccard,
    MagDiv,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Cosine, Metric::Jaccard, Metric::MagDiv];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Jaccard => "jaccard",
            Metric::MagDiv => "mag_div",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = LexError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "jaccard" => Ok(Metric::Jaccard),
            "mag_div" => Ok(Metric::MagDiv),
            other => Err(LexError::InvalidInput(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapSample {
    pub cosine: f64,
    pub jaccard: f64,
    /// Absent when the active sets do not intersect.
    pub mag_div: Option<f64>,
}

fn same_len(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(LexError::DimensionMismatch(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    same_len(a, b)?;
    if a.is_empty() {
        return Err(LexError::Undefined("cosine of empty vectors".into()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(LexError::Undefined("cosine with a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Sorted indices with `|v_i| > median(|v|)`.
pub fn active_set(v: &[f32]) -> Vec<u32> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut abs: Vec<f64> = v.iter().map(|x| (*x as f64).abs()).collect();
    abs.sort_by(f64::total_cmp);
    let med = stats::quantile_sorted(&abs, 0.5);
    v.iter()
        .enumerate()
        .filter(|(_, x)| (**x as f64).abs() > med)
        .map(|(i, _)| i as u32)
        .collect()
}

fn intersect(a: &[u32], b: &[u32]) -> Vec<u32> {
    let (mut i, mut j, mut out) = (0, 0, Vec::new());
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

fn jaccard_of(a: &[u32], b: &[u32]) -> f64 {
    let inter = intersect(a, b).len();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn mag_div_of(x: &[f32], y: &[f32], shared: &[u32]) -> Option<f64> {
    if shared.is_empty() {
        return None;
    }
    let total: f64 = shared
        .iter()
        .map(|&i| (x[i as usize] as f64 - y[i as usize] as f64).abs())
        .sum();
    Some(total / shared.len() as f64)
}

/// Jaccard overlap of the two active sets; 0 when both are empty.
pub fn jaccard_active(a: &[f32], b: &[f32]) -> Result<f64> {
    same_len(a, b)?;
    Ok(jaccard_of(&active_set(a), &active_set(b)))
}

/// Mean `|a_i - b_i|` over neurons active in both vectors.
pub fn magnitude_divergence(a: &[f32], b: &[f32]) -> Result<Option<f64>> {
    same_len(a, b)?;
    let shared = intersect(&active_set(a), &active_set(b));
    Ok(mag_div_of(a, b, &shared))
}

pub fn overlap_sample(a: &[f32], b: &[f32]) -> Result<OverlapSample> {
    let (aa, ab) = (active_set(a), active_set(b));
    let shared = intersect(&aa, &ab);
    Ok(OverlapSample {
        cosine: cosine(a, b)?,
        jaccard: jaccard_of(&aa, &ab),
        mag_div: mag_div_of(a, b, &shared),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub n_words: usize,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionStats {
    pub metrics: BTreeMap<Metric, MetricStats>,
    /// Word key -> mean over that word's pairs, per metric.
    #[serde(skip)]
    pub per_word: BTreeMap<Metric, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub layer: usize,
    pub site: String,
    pub conditions: BTreeMap<Condition, ConditionStats>,
}

impl ConditionSummary {
    /// Cross-word mean of `metric` under `condition`.
    pub fn mean(&self, condition: Condition, metric: Metric) -> Option<f64> {
        self.conditions
            .get(&condition)?
            .metrics
            .get(&metric)
            .map(|m| m.mean)
    }

    pub fn per_word(&self, condition: Condition, metric: Metric) -> Option<&BTreeMap<String, f64>> {
        self.conditions.get(&condition)?.per_word.get(&metric)
    }
}

struct RowFeatures {
    norm: f64,
    active: Vec<u32>,
}

/// Condition summary with activations taken from the store.
pub fn condition_summary(
    store: &ActivationStore,
    pairs: &PairSet,
    layer: usize,
    site: &str,
    bootstrap: Option<&BootstrapConfig>,
) -> Result<ConditionSummary> {
    let m = store.matrix(site, layer)?;
    summarize_matrix(&m, pairs, layer, site, bootstrap)
}

/// Condition summary over an explicit activation matrix whose rows follow
/// the global sentence order. Without a bootstrap config the CI fields are
/// left empty.
pub fn summarize_matrix(
    m: &Matrix,
    pairs: &PairSet,
    layer: usize,
    site: &str,
    bootstrap: Option<&BootstrapConfig>,
) -> Result<ConditionSummary> {
    let mut used = vec![false; m.rows()];
    for p in pairs.iter() {
        for id in [p.sent_a, p.sent_b] {
            *used.get_mut(id).ok_or_else(|| {
                LexError::OutOfRange(format!("pair sentence {id} (matrix has {} rows)", m.rows()))
            })? = true;
        }
    }
    let features: Vec<Option<RowFeatures>> = (0..m.rows())
        .into_par_iter()
        .map(|i| {
            used[i].then(|| {
                let row = m.row(i);
                RowFeatures {
                    norm: norm(row),
                    active: active_set(row),
                }
            })
        })
        .collect();

    let pair_sample = |a: usize, b: usize| -> Result<OverlapSample> {
        let (fa, fb) = (features[a].as_ref().unwrap(), features[b].as_ref().unwrap());
        if fa.norm == 0.0 || fb.norm == 0.0 {
            let zero = if fa.norm == 0.0 { a } else { b };
            return Err(LexError::Undefined(format!(
                "sentence {zero} has a zero activation vector at {site} layer {layer}"
            )));
        }
        let (ra, rb) = (m.row(a), m.row(b));
        let shared = intersect(&fa.active, &fb.active);
        Ok(OverlapSample {
            cosine: (dot(ra, rb) / (fa.norm * fb.norm)).clamp(-1.0, 1.0),
            jaccard: jaccard_of(&fa.active, &fb.active),
            mag_div: mag_div_of(ra, rb, &shared),
        })
    };

    // (word, condition) -> per-metric (sum, count)
    type Acc = BTreeMap<Metric, (f64, usize)>;
    let per_group: Vec<((String, Condition), Acc)> = pairs
        .groups
        .par_iter()
        .flat_map_iter(|(w, g)| g.iter().map(move |(c, p)| ((w.clone(), *c), p)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(key, list)| {
            let mut acc: Acc = BTreeMap::new();
            for &(a, b) in list {
                let s = pair_sample(a, b)?;
                let e = acc.entry(Metric::Cosine).or_insert((0.0, 0));
                e.0 += s.cosine;
                e.1 += 1;
                let e = acc.entry(Metric::Jaccard).or_insert((0.0, 0));
                e.0 += s.jaccard;
                e.1 += 1;
                let e = acc.entry(Metric::MagDiv).or_insert((0.0, 0));
                if let Some(v) = s.mag_div {
                    e.0 += v;
                    e.1 += 1;
                }
            }
            Ok((key, acc))
        })
        .collect::<Result<_>>()?;

    let mut conditions: BTreeMap<Condition, ConditionStats> = BTreeMap::new();
    let mut pair_counts: BTreeMap<(Condition, Metric), usize> = BTreeMap::new();
    for ((word, cond), acc) in per_group {
        let stats = conditions.entry(cond).or_insert_with(|| ConditionStats {
            metrics: BTreeMap::new(),
            per_word: BTreeMap::new(),
        });
        for (metric, (sum, n)) in acc {
            if n == 0 {
                continue;
            }
            stats.per_word.entry(metric).or_default().insert(word.clone(), sum / n as f64);
            *pair_counts.entry((cond, metric)).or_default() += n;
        }
    }
    for (cond, stats) in conditions.iter_mut() {
        for (metric, words) in &stats.per_word {
            let values: Vec<f64> = words.values().copied().collect();
            let mean = stats::mean(&values);
            let (ci_lo, ci_hi) = match bootstrap {
                Some(cfg) => {
                    let ci = stats::bootstrap_ci(words, cfg.n_resamples, cfg.seed, cfg.level)?;
                    (Some(ci.lo), Some(ci.hi))
                }
                None => (None, None),
            };
            stats.metrics.insert(
                *metric,
                MetricStats {
                    mean,
                    ci_lo,
                    ci_hi,
                    n_words: words.len(),
                    n_pairs: pair_counts[&(*cond, *metric)],
                },
            );
        }
    }
    conditions.retain(|_, s| !s.metrics.is_empty());
    Ok(ConditionSummary {
        layer,
        site: site.to_string(),
        conditions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cosine(&[3.0, 4.0], &[4.0, 3.0]).unwrap(), 0.96, epsilon = 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(LexError::Undefined(_))));
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard_active(&[0.0, 1.0, 2.0, 3.0], &[3.0, 2.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(jaccard_active(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(
            jaccard_active(&[5.0, 1.0, 4.0, 0.0], &[5.0, 4.0, 1.0, 0.0]).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-12
        );
        // Constant vectors have no neuron strictly above the median.
        assert_eq!(jaccard_active(&[1.0, 1.0], &[2.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn magnitude_divergence_examples() {
        assert_eq!(magnitude_divergence(&[5.0, 0.0, 0.0], &[5.0, 0.0, 0.0]).unwrap(), Some(0.0));
        assert_eq!(
            magnitude_divergence(&[4.0, 3.0, 0.0, 0.0], &[2.0, 5.0, 0.0, 0.0]).unwrap(),
            Some(2.0)
        );
        assert_eq!(
            magnitude_divergence(&[0.0, 1.0, 2.0, 3.0], &[3.0, 2.0, 1.0, 0.0]).unwrap(),
            None
        );
    }

    fn vec_strategy() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
        (2usize..16).prop_flat_map(|n| {
            (
                prop::collection::vec(-5.0f32..5.0, n),
                prop::collection::vec(-5.0f32..5.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric((a, b) in vec_strategy()) {
            prop_assume!(norm(&a) > 0.0 && norm(&b) > 0.0);
            let ab = overlap_sample(&a, &b).unwrap();
            let ba = overlap_sample(&b, &a).unwrap();
            prop_assert!((ab.cosine - ba.cosine).abs() < 1e-12);
            prop_assert_eq!(ab.jaccard, ba.jaccard);
            prop_assert_eq!(ab.mag_div, ba.mag_div);
        }

        #[test]
        fn cosine_scale_invariant((a, b) in vec_strategy(), k in 0.01f32..100.0) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let scaled: Vec<f32> = a.iter().map(|x| x * k).collect();
            prop_assert!((cosine(&a, &b).unwrap() - cosine(&scaled, &b).unwrap()).abs() < 1e-5);
        }

        #[test]
        fn jaccard_invariant_under_monotone_magnitude_map((a, b) in vec_strategy()) {
            // x -> sign(x) * (|x|^3 + |x|) is strictly increasing in |x|.
            let f = |v: &[f32]| v.iter().map(|x| x.signum() * (x.abs().powi(3) + x.abs())).collect::<Vec<_>>();
            prop_assert_eq!(jaccard_active(&a, &b).unwrap(), jaccard_active(&f(&a), &f(&b)).unwrap());
        }
    }

    fn pairset(entries: &[(&str, Condition, &[(usize, usize)])]) -> PairSet {
        let mut set = PairSet::default();
        for (w, c, p) in entries {
            set.groups.entry(w.to_string()).or_default().insert(*c, p.to_vec());
        }
        set
    }

    #[test]
    fn identical_vectors_give_unit_overlap() {
        let m = Matrix::new(6, 4, [1.0f32, 2.0, 3.0, 4.0].repeat(6)).unwrap();
        let set = pairset(&[
            ("a.n", Condition::SL, &[(0, 1)]),
            ("a.n", Condition::PS, &[(0, 2)]),
            ("a.n", Condition::CL, &[(0, 3)]),
            ("b.n", Condition::SL, &[(4, 5)]),
        ]);
        let s = summarize_matrix(&m, &set, 0, "mlp", None).unwrap();
        for c in [Condition::SL, Condition::PS, Condition::CL] {
            assert_abs_diff_eq!(s.mean(c, Metric::Cosine).unwrap(), 1.0, epsilon = 1e-12);
            assert_eq!(s.mean(c, Metric::Jaccard).unwrap(), 1.0);
        }
        assert!(s.mean(Condition::SYN, Metric::Cosine).is_none());
        assert_eq!(s.conditions[&Condition::SL].metrics[&Metric::Cosine].n_words, 2);
    }

    #[test]
    fn per_word_then_cross_word_mean() {
        // Word a: two orthogonal pairs (cos 0, 0); word b: one parallel pair.
        let m = Matrix::from_rows(
            2,
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, 2.0]],
        )
        .unwrap();
        let set = pairset(&[
            ("a.n", Condition::PS, &[(0, 1), (2, 3)]),
            ("b.n", Condition::PS, &[(4, 5)]),
        ]);
        let s = summarize_matrix(&m, &set, 0, "mlp", None).unwrap();
        assert_abs_diff_eq!(s.mean(Condition::PS, Metric::Cosine).unwrap(), 0.5, epsilon = 1e-12);
        // Duplicating a word's pairs leaves its mean unchanged.
        let dup = pairset(&[
            ("a.n", Condition::PS, &[(0, 1), (2, 3), (0, 3), (1, 2)]),
            ("b.n", Condition::PS, &[(4, 5)]),
        ]);
        let s2 = summarize_matrix(&m, &dup, 0, "mlp", None).unwrap();
        assert_eq!(s.mean(Condition::PS, Metric::Cosine), s2.mean(Condition::PS, Metric::Cosine));
    }

    #[test]
    fn zero_rows_are_reported() {
        let m = Matrix::from_rows(2, &[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let set = pairset(&[("a.n", Condition::PS, &[(0, 1)])]);
        let err = summarize_matrix(&m, &set, 0, "mlp", None).unwrap_err();
        assert!(err.to_string().contains("sentence 1"), "{err}");
    }

    #[test]
    fn bootstrap_fields_populated() {
        let rows: Vec<Vec<f32>> = (0..8).map(|i| vec![1.0 + i as f32, 2.0, (i % 3) as f32, 1.0]).collect();
        let m = Matrix::from_rows(4, &rows).unwrap();
        let set = pairset(&[
            ("a.n", Condition::SL, &[(0, 1)]),
            ("b.n", Condition::SL, &[(2, 3)]),
            ("c.n", Condition::SL, &[(4, 5), (6, 7)]),
        ]);
        let cfg = BootstrapConfig { n_resamples: 200, seed: 42, level: 0.95 };
        let s = summarize_matrix(&m, &set, 0, "mlp", Some(&cfg)).unwrap();
        let st = &s.conditions[&Condition::SL].metrics[&Metric::Cosine];
        assert!(st.ci_lo.unwrap() <= st.mean && st.mean <= st.ci_hi.unwrap());
        assert_eq!(st.n_pairs, 4);
    }
}
