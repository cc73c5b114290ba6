// SPDX-License-Identifier: MIT OR Apache-2.0

//! Lexical contribution ratio, interaction term, ordering tests and layer
//! trends computed from per-condition overlap summaries.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LexError, Result};
use crate::overlap::{self, ConditionSummary, Metric, MetricStats};
use crate::pairing::{Condition, PairSet};
use crate::stats::{self, BootstrapConfig, PMethod};
use crate::store::ActivationStore;

pub const INTERACTION_LABEL: &str = "interaction (assumed factorial form)";
pub const WILCOXON_SIDES: &str = "two-sided";
/// Fewer paired words than this and the PS-vs-SYN test is not run.
pub const MIN_WILCOXON_WORDS: usize = 5;

fn ratio(num: f64, den: f64, what: &str) -> Result<f64> {
    if den == 0.0 || !den.is_finite() {
        return Err(LexError::Undefined(format!("{what}: SL mean equals CL mean")));
    }
    Ok(num / den)
}

/// `(PS - SYN) / (SL - CL)`.
pub fn r_lex(sl: f64, ps: f64, syn: f64, cl: f64) -> Result<f64> {
    ratio(ps - syn, sl - cl, "R_lex")
}

/// `(PS - CL) / (SL - CL)`.
pub fn r_lex_no_syn(sl: f64, ps: f64, cl: f64) -> Result<f64> {
    ratio(ps - cl, sl - cl, "R_lex_no_syn")
}

/// `(SL - PS) - (SYN - CL)`.
pub fn interaction(sl: f64, ps: f64, syn: f64, cl: f64) -> f64 {
    (sl - ps) - (syn - cl)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub statistic: f64,
    pub p_value: f64,
    /// Holm-adjusted across the layers that were tested.
    pub p_holm: f64,
    pub n: usize,
    pub method: PMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderingFlags {
    pub sl_gt_ps: bool,
    pub ps_gt_syn: Option<bool>,
    pub syn_gt_cl: Option<bool>,
    pub ps_gt_cl: bool,
    /// SL > PS > SYN > CL.
    pub full: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDecomposition {
    pub layer: usize,
    pub conditions: BTreeMap<Condition, MetricStats>,
    pub r_lex: Option<Estimate>,
    pub r_lex_no_syn: Option<Estimate>,
    pub interaction: Option<f64>,
    pub ps_vs_syn: Option<PairedTest>,
    pub ordering: OrderingFlags,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub site: String,
    pub metric: Metric,
    pub interaction_form: String,
    pub wilcoxon_sides: String,
    pub layers: Vec<LayerDecomposition>,
    /// Mean of the per-layer values that exist.
    pub layer_average_r_lex: Option<f64>,
    pub layer_average_r_lex_no_syn: Option<f64>,
    /// Least-squares slope of R_lex against layer index.
    pub r_lex_trend_slope: Option<f64>,
}

impl DecompositionResult {
    pub fn layer(&self, layer: usize) -> Option<&LayerDecomposition> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Long format: `layer,condition,mean,ci_lo,ci_hi`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "condition", "mean", "ci_lo", "ci_hi"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for l in &self.layers {
            for (c, s) in &l.conditions {
                w.write_record([
                    l.layer.to_string(),
                    c.to_string(),
                    format!("{}", s.mean),
                    opt(s.ci_lo),
                    opt(s.ci_hi),
                ])?;
            }
        }
        w.into_inner().map_err(|e| LexError::InvalidInput(e.to_string()))
    }
}

/// Means present in a summary for one metric.
struct Means {
    sl: f64,
    ps: f64,
    syn: Option<f64>,
    cl: f64,
}

fn means(summary: &ConditionSummary, metric: Metric) -> Result<Means> {
    let get = |c: Condition| {
        summary.mean(c, metric).ok_or_else(|| {
            LexError::InvalidInput(format!(
                "layer {}: no {c} pairs with a {metric} value",
                summary.layer
            ))
        })
    };
    Ok(Means {
        sl: get(Condition::SL)?,
        ps: get(Condition::PS)?,
        syn: summary.mean(Condition::SYN, metric),
        cl: get(Condition::CL)?,
    })
}

/// Per-word values as dense vectors over a fixed word list; `NaN` where a
/// word lacks the condition.
fn per_word_table(summary: &ConditionSummary, metric: Metric) -> (Vec<String>, BTreeMap<Condition, Vec<f64>>) {
    let mut words = BTreeSet::new();
    for c in Condition::ALL {
        if let Some(m) = summary.per_word(c, metric) {
            words.extend(m.keys().cloned());
        }
    }
    let words: Vec<String> = words.into_iter().collect();
    let mut table = BTreeMap::new();
    for c in Condition::ALL {
        let col = words
            .iter()
            .map(|w| {
                summary
                    .per_word(c, metric)
                    .and_then(|m| m.get(w))
                    .copied()
                    .unwrap_or(f64::NAN)
            })
            .collect();
        table.insert(c, col);
    }
    (words, table)
}

fn nan_mean(col: &[f64], idx: &[usize]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for &i in idx {
        let v = col[i];
        if !v.is_nan() {
            s += v;
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn decompose_layer(summary: &ConditionSummary, metric: Metric, boot: Option<&BootstrapConfig>) -> Result<(LayerDecomposition, Option<stats::TestResult>)> {
    let m = means(summary, metric)?;
    let mut warnings = Vec::new();
    let (words, table) = per_word_table(summary, metric);
    let all: Vec<usize> = (0..words.len()).collect();
    let col = |c: Condition| &table[&c];

    let boot_ratio = |point: f64, f: &(dyn Fn(&[usize]) -> f64 + Sync)| -> Result<Estimate> {
        match boot {
            Some(cfg) => {
                let ci = stats::bootstrap_with(words.len(), cfg, point, f)?;
                Ok(Estimate { value: point, ci_lo: Some(ci.lo), ci_hi: Some(ci.hi) })
            }
            None => Ok(Estimate { value: point, ci_lo: None, ci_hi: None }),
        }
    };

    let r_no_syn = match r_lex_no_syn(m.sl, m.ps, m.cl) {
        Ok(v) => Some(boot_ratio(v, &|idx: &[usize]| {
            let (sl, ps, cl) = (nan_mean(col(Condition::SL), idx), nan_mean(col(Condition::PS), idx), nan_mean(col(Condition::CL), idx));
            (ps - cl) / (sl - cl)
        })?),
        Err(e) => {
            warnings.push(e.to_string());
            None
        }
    };
    let (r, inter) = match m.syn {
        Some(syn) => {
            let inter = interaction(m.sl, m.ps, syn, m.cl);
            match r_lex(m.sl, m.ps, syn, m.cl) {
                Ok(v) => {
                    let est = boot_ratio(v, &|idx: &[usize]| {
                        let sl = nan_mean(col(Condition::SL), idx);
                        let ps = nan_mean(col(Condition::PS), idx);
                        let syn = nan_mean(col(Condition::SYN), idx);
                        let cl = nan_mean(col(Condition::CL), idx);
                        (ps - syn) / (sl - cl)
                    })?;
                    (Some(est), Some(inter))
                }
                Err(e) => {
                    warnings.push(e.to_string());
                    (None, Some(inter))
                }
            }
        }
        None => {
            warnings.push(format!(
                "layer {}: no synonym-covered words; R_lex and the interaction term are not computed",
                summary.layer
            ));
            (None, None)
        }
    };

    let paired: Vec<usize> = all
        .iter()
        .copied()
        .filter(|&i| !col(Condition::PS)[i].is_nan() && !col(Condition::SYN)[i].is_nan())
        .collect();
    let test = if paired.len() >= MIN_WILCOXON_WORDS {
        let ps: Vec<f64> = paired.iter().map(|&i| col(Condition::PS)[i]).collect();
        let syn: Vec<f64> = paired.iter().map(|&i| col(Condition::SYN)[i]).collect();
        Some(stats::wilcoxon_signed_rank(&ps, &syn)?)
    } else {
        if m.syn.is_some() {
            warnings.push(format!(
                "layer {}: {} words with both PS and SYN pairs; Wilcoxon needs {MIN_WILCOXON_WORDS}",
                summary.layer,
                paired.len()
            ));
        }
        None
    };

    let conditions = summary
        .conditions
        .iter()
        .filter_map(|(c, s)| s.metrics.get(&metric).map(|ms| (*c, ms.clone())))
        .collect();
    let ordering = OrderingFlags {
        sl_gt_ps: m.sl > m.ps,
        ps_gt_syn: m.syn.map(|s| m.ps > s),
        syn_gt_cl: m.syn.map(|s| s > m.cl),
        ps_gt_cl: m.ps > m.cl,
        full: m.syn.map(|s| m.sl > m.ps && m.ps > s && s > m.cl),
    };
    Ok((
        LayerDecomposition {
            layer: summary.layer,
            conditions,
            r_lex: r,
            r_lex_no_syn: r_no_syn,
            interaction: inter,
            ps_vs_syn: None,
            ordering,
            warnings,
        },
        test,
    ))
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| stats::mean(&v))
}

fn slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Decompose precomputed summaries (one per layer, any order; output is
/// sorted by layer).
pub fn decompose_summaries(summaries: &[ConditionSummary], metric: Metric, boot: Option<&BootstrapConfig>) -> Result<DecompositionResult> {
    let site = summaries
        .first()
        .map(|s| s.site.clone())
        .ok_or_else(|| LexError::InvalidInput("no layers to decompose".into()))?;
    let mut parts: Vec<(LayerDecomposition, Option<stats::TestResult>)> = summaries
        .par_iter()
        .map(|s| decompose_layer(s, metric, boot))
        .collect::<Result<_>>()?;
    parts.sort_by_key(|(l, _)| l.layer);

    let tested: Vec<usize> = (0..parts.len()).filter(|&i| parts[i].1.is_some()).collect();
    let raw: Vec<f64> = tested.iter().map(|&i| parts[i].1.unwrap().p_value).collect();
    let adjusted = stats::holm_bonferroni(&raw);
    for (&i, p_holm) in tested.iter().zip(adjusted) {
        let t = parts[i].1.unwrap();
        parts[i].0.ps_vs_syn = Some(PairedTest {
            statistic: t.statistic,
            p_value: t.p_value,
            p_holm,
            n: t.n,
            method: t.method,
        });
    }
    let layers: Vec<LayerDecomposition> = parts.into_iter().map(|(l, _)| l).collect();
    let points: Vec<(f64, f64)> = layers
        .iter()
        .filter_map(|l| l.r_lex.map(|r| (l.layer as f64, r.value)))
        .collect();
    Ok(DecompositionResult {
        site,
        metric,
        interaction_form: INTERACTION_LABEL.into(),
        wilcoxon_sides: WILCOXON_SIDES.into(),
        layer_average_r_lex: mean_of(layers.iter().filter_map(|l| l.r_lex.map(|r| r.value))),
        layer_average_r_lex_no_syn: mean_of(layers.iter().filter_map(|l| l.r_lex_no_syn.map(|r| r.value))),
        r_lex_trend_slope: slope(&points),
        layers,
    })
}

/// Summaries and decomposition for every listed layer of `site`.
pub fn decompose_layers(
    store: &ActivationStore,
    pairs: &PairSet,
    site: &str,
    layers: &[usize],
    metric: Metric,
    boot: Option<&BootstrapConfig>,
) -> Result<DecompositionResult> {
    let summaries: Vec<ConditionSummary> = layers
        .par_iter()
        .map(|&layer| overlap::condition_summary(store, pairs, layer, site, boot))
        .collect::<Result<_>>()?;
    decompose_summaries(&summaries, metric, boot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingComparison {
    pub r_lex_emb: f64,
    pub r_lex_layer0: f64,
    pub exceeds: bool,
    pub margin: f64,
}

/// Compare layer-0 R_lex with the token-embedding R_lex.
pub fn embedding_baseline(mlp: &DecompositionResult, emb: &DecompositionResult) -> Result<EmbeddingComparison> {
    let first = |r: &DecompositionResult, what: &str| {
        r.layers
            .iter()
            .min_by_key(|l| l.layer)
            .and_then(|l| l.r_lex)
            .map(|e| e.value)
            .ok_or_else(|| LexError::Undefined(format!("{what} result has no R_lex")))
    };
    let l0 = first(mlp, "MLP")?;
    let e = first(emb, "embedding")?;
    Ok(EmbeddingComparison {
        r_lex_emb: e,
        r_lex_layer0: l0,
        exceeds: l0 > e,
        margin: l0 - e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::overlap::ConditionStats;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn formula_examples() {
        assert_abs_diff_eq!(r_lex(0.8, 0.6, 0.4, 0.2).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        assert_eq!(r_lex(0.8, 0.5, 0.5, 0.2).unwrap(), 0.0);
        assert!(matches!(r_lex(0.5, 0.6, 0.4, 0.5), Err(LexError::Undefined(_))));
        assert_abs_diff_eq!(r_lex_no_syn(0.8, 0.6, 0.2).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(r_lex_no_syn(0.8, 0.2, 0.2).unwrap(), 0.0);
        assert_eq!(r_lex_no_syn(0.8, 0.8, 0.2).unwrap(), 1.0);
        assert_abs_diff_eq!(interaction(0.9, 0.5, 0.5, 0.2), 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(interaction(0.8, 0.6, 0.4, 0.2), 0.0, epsilon = 1e-12);
        let (l, s) = (0.7, 0.3);
        assert_abs_diff_eq!(interaction(l + s, l, s, 0.0), 0.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn r_lex_affine_invariant(
            sl in 0.5f64..1.0, ps in 0.0f64..0.5, syn in 0.0f64..0.5, cl in -0.5f64..0.0,
            shift in -3.0f64..3.0, scale in 0.1f64..10.0,
        ) {
            let a = r_lex(sl, ps, syn, cl).unwrap();
            let t = |x: f64| scale * x + shift;
            let b = r_lex(t(sl), t(ps), t(syn), t(cl)).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }

        #[test]
        fn nested_formulas_agree_when_syn_equals_cl(sl in 0.5f64..1.0, ps in -1.0f64..1.0, cl in -0.5f64..0.4) {
            prop_assert!((r_lex(sl, ps, cl, cl).unwrap() - r_lex_no_syn(sl, ps, cl).unwrap()).abs() < 1e-12);
        }
    }

    fn summary(layer: usize, per_word: &[(&str, [Option<f64>; 4])]) -> ConditionSummary {
        let mut conditions = BTreeMap::new();
        for (ci, c) in Condition::ALL.into_iter().enumerate() {
            let words: BTreeMap<String, f64> = per_word
                .iter()
                .filter_map(|(w, v)| v[ci].map(|x| (w.to_string(), x)))
                .collect();
            if words.is_empty() {
                continue;
            }
            let vals: Vec<f64> = words.values().copied().collect();
            let stats = MetricStats {
                mean: stats::mean(&vals),
                ci_lo: None,
                ci_hi: None,
                n_words: vals.len(),
                n_pairs: vals.len(),
            };
            conditions.insert(
                c,
                ConditionStats {
                    metrics: [(Metric::Cosine, stats)].into(),
                    per_word: [(Metric::Cosine, words)].into(),
                },
            );
        }
        ConditionSummary {
            layer,
            site: "mlp_intermediate".into(),
            conditions,
        }
    }

    fn words(n: usize, f: impl Fn(usize) -> [Option<f64>; 4]) -> Vec<(String, [Option<f64>; 4])> {
        (0..n).map(|i| (format!("w{i:02}.n"), f(i))).collect()
    }

    fn as_refs(v: &[(String, [Option<f64>; 4])]) -> Vec<(&str, [Option<f64>; 4])> {
        v.iter().map(|(w, x)| (w.as_str(), *x)).collect()
    }

    #[test]
    fn layer_fields_and_holm() {
        let w = words(8, |i| {
            let e = i as f64 * 0.01;
            [Some(0.8 + e), Some(0.6 + e), Some(0.4 - e), Some(0.2)]
        });
        let s0 = summary(0, &as_refs(&w));
        let s1 = summary(1, &as_refs(&w));
        let cfg = BootstrapConfig { n_resamples: 500, seed: 42, level: 0.95 };
        let r = decompose_summaries(&[s1, s0], Metric::Cosine, Some(&cfg)).unwrap();
        assert_eq!(r.layers[0].layer, 0);
        let l = &r.layers[0];
        let est = l.r_lex.unwrap();
        assert!(est.ci_lo.unwrap() <= est.value && est.value <= est.ci_hi.unwrap());
        assert_eq!(l.ordering.full, Some(true));
        let t = l.ps_vs_syn.unwrap();
        // Eight positive differences: exact two-sided p = 2 / 2^8.
        assert_abs_diff_eq!(t.p_value, 2.0 / 256.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.p_holm, 2.0 * 2.0 / 256.0, epsilon = 1e-12);
        assert_eq!(r.r_lex_trend_slope, Some(0.0));
        assert_eq!(r.interaction_form, INTERACTION_LABEL);
    }

    #[test]
    fn missing_synonyms_leave_no_syn_ratio() {
        let w = words(6, |_| [Some(0.8), Some(0.6), None, Some(0.2)]);
        let r = decompose_summaries(&[summary(0, &as_refs(&w))], Metric::Cosine, None).unwrap();
        let l = &r.layers[0];
        assert!(l.r_lex.is_none() && l.interaction.is_none() && l.ps_vs_syn.is_none());
        assert_abs_diff_eq!(l.r_lex_no_syn.unwrap().value, 2.0 / 3.0, epsilon = 1e-12);
        assert!(l.warnings.iter().any(|m| m.contains("synonym")));
    }

    #[test]
    fn bootstrap_resamples_words_ratio_of_means() {
        // Two words with very different per-word ratios: the point estimate
        // is the ratio of cross-word means, not the mean of ratios.
        let w = vec![
            ("a.n", [Some(1.0), Some(0.9), Some(0.1), Some(0.0)]),
            ("b.n", [Some(0.5), Some(0.1), Some(0.1), Some(0.0)]),
        ];
        let r = decompose_summaries(&[summary(0, &w)], Metric::Cosine, None).unwrap();
        assert_abs_diff_eq!(r.layers[0].r_lex.unwrap().value, (0.5 - 0.1) / 0.75, epsilon = 1e-12);
    }

    #[test]
    fn embedding_comparison() {
        let w = words(6, |_| [Some(0.8), Some(0.6), Some(0.4), Some(0.2)]);
        let r = decompose_summaries(&[summary(0, &as_refs(&w))], Metric::Cosine, None).unwrap();
        let c = embedding_baseline(&r, &r).unwrap();
        assert!(!c.exceeds);
        assert_eq!(c.margin, 0.0);
    }

    #[test]
    fn csv_long_format() {
        let w = words(2, |_| [Some(0.8), Some(0.6), Some(0.4), Some(0.2)]);
        let r = decompose_summaries(&[summary(3, &as_refs(&w))], Metric::Cosine, None).unwrap();
        let text = String::from_utf8(r.to_csv().unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "layer,condition,mean,ci_lo,ci_hi");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("3,SL,0.8,"));
    }
}
