// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sense-selectivity index, neuron classification, form-detector ranking and
//! raw / lexically adjusted polysemanticity scores.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LexError, Result};
use crate::stats::{self, Moments};
use crate::store::manifest::{SenseLabel, WordEntry};
use crate::store::{ActivationStore, Matrix};

pub const THETA_SELECTIVE: f64 = 2.0;
pub const THETA_BLIND: f64 = 0.5;
pub const DEFAULT_TOP_K: usize = 50;
pub const DEFAULT_QUANTILE: f64 = 0.75;
pub const DEFAULT_FLAG_THRESHOLD: f64 = 0.5;
/// Below this absolute mean the coefficient of variation is not used.
pub const CONSISTENCY_MEAN_FLOOR: f64 = 1e-6;

fn column_moments(m: &Matrix, ids: &[usize]) -> Vec<Moments> {
    let d = m.cols();
    let n = ids.len();
    let mut sum = vec![0.0f64; d];
    for &i in ids {
        for (s, &x) in sum.iter_mut().zip(m.row(i)) {
            *s += x as f64;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n.max(1) as f64).collect();
    let mut ss = vec![0.0f64; d];
    for &i in ids {
        for ((acc, &x), mu) in ss.iter_mut().zip(m.row(i)).zip(&mean) {
            let e = x as f64 - mu;
            *acc += e * e;
        }
    }
    mean.into_iter()
        .zip(ss)
        .map(|(mean, ss)| Moments {
            n,
            mean,
            var: if n > 1 { ss / (n - 1) as f64 } else { 0.0 },
        })
        .collect()
}

fn word_entry<'a>(store: &'a ActivationStore, word: &str) -> Result<&'a WordEntry> {
    let m = store.manifest();
    m.word_index(word)
        .map(|i| &m.words[i])
        .ok_or_else(|| LexError::InvalidInput(format!("word {word} not in manifest")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsiVector {
    pub word: String,
    pub layer: usize,
    /// Per-neuron SSI, `|d|`; infinite when the pooled deviation vanishes.
    pub values: Vec<f64>,
    /// Signed `(mean_A - mean_B) / s_pooled`.
    pub signed: Vec<f64>,
    /// Per-neuron mean `|activation|` over the word's sense-A and sense-B sentences.
    pub mean_abs_activation: Vec<f64>,
}

pub fn ssi(store: &ActivationStore, word: &str, layer: usize, site: &str) -> Result<SsiVector> {
    let m = store.matrix(site, layer)?;
    ssi_from_matrix(&m, word_entry(store, word)?, layer)
}

pub fn ssi_from_matrix(m: &Matrix, w: &WordEntry, layer: usize) -> Result<SsiVector> {
    let a = w.sentence_ids(SenseLabel::A);
    let b = w.sentence_ids(SenseLabel::B);
    if a.len() < 2 || b.len() < 2 {
        return Err(LexError::InvalidInput(format!(
            "{}: SSI needs 2 sentences per sense (have {} and {})",
            w.key(),
            a.len(),
            b.len()
        )));
    }
    let (ma, mb) = (column_moments(m, &a), column_moments(m, &b));
    let signed: Vec<f64> = ma
        .iter()
        .zip(&mb)
        .map(|(x, y)| stats::standardized_difference(*x, *y))
        .collect::<Result<_>>()?;
    let mut mean_abs = vec![0.0f64; m.cols()];
    for &i in a.iter().chain(&b) {
        for (acc, &x) in mean_abs.iter_mut().zip(m.row(i)) {
            *acc += (x as f64).abs();
        }
    }
    let n = (a.len() + b.len()) as f64;
    mean_abs.iter_mut().for_each(|x| *x /= n);
    Ok(SsiVector {
        word: w.key(),
        layer,
        values: signed.iter().map(|x| x.abs()).collect(),
        signed,
        mean_abs_activation: mean_abs,
    })
}

/// SSI for every word with two or more sentences per sense, in manifest order.
pub fn ssi_layer(store: &ActivationStore, layer: usize, site: &str) -> Result<Vec<SsiVector>> {
    let m = store.matrix(site, layer)?;
    store
        .manifest()
        .words
        .par_iter()
        .filter(|w| w.count(SenseLabel::A) >= 2 && w.count(SenseLabel::B) >= 2)
        .map(|w| ssi_from_matrix(&m, w, layer))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub selective: f64,
    pub blind: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            selective: THETA_SELECTIVE,
            blind: THETA_BLIND,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronClassification {
    pub word: String,
    pub layer: usize,
    pub selective: Vec<usize>,
    /// Selective neurons with the higher mean on sense A.
    pub selective_a: Vec<usize>,
    pub selective_b: Vec<usize>,
    pub blind: Vec<usize>,
}

/// Selective: SSI above `selective`. Blind: SSI below `blind` and mean
/// `|activation|` above the median of that quantity over the layer's neurons.
pub fn classify(v: &SsiVector, t: &Thresholds) -> NeuronClassification {
    let med = stats::median(&v.mean_abs_activation);
    let mut out = NeuronClassification {
        word: v.word.clone(),
        layer: v.layer,
        selective: Vec::new(),
        selective_a: Vec::new(),
        selective_b: Vec::new(),
        blind: Vec::new(),
    };
    for (j, &s) in v.values.iter().enumerate() {
        if s > t.selective {
            out.selective.push(j);
            if v.signed[j] > 0.0 {
                out.selective_a.push(j);
            } else {
                out.selective_b.push(j);
            }
        } else if s < t.blind && v.mean_abs_activation[j] > med {
            out.blind.push(j);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormScore {
    pub neuron: usize,
    pub consistency: f64,
    /// Signed effect size of this word's activations against all other
    /// words' sentences; `+inf` when the pooled deviation vanishes.
    pub specificity: f64,
    pub product: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormDetectorRanking {
    pub word: String,
    pub layer: usize,
    pub k: usize,
    /// Every neuron, best first.
    pub ranked: Vec<FormScore>,
}

impl FormDetectorRanking {
    pub fn top(&self) -> &[FormScore] {
        &self.ranked[..self.k.min(self.ranked.len())]
    }

    pub fn top_neurons(&self) -> Vec<usize> {
        self.top().iter().map(|s| s.neuron).collect()
    }
}

pub fn consistency(m: Moments) -> f64 {
    if m.mean.abs() < CONSISTENCY_MEAN_FLOOR {
        return 0.0;
    }
    (1.0 - m.var.max(0.0).sqrt() / m.mean.abs()).clamp(0.0, 1.0)
}

fn product(consistency: f64, specificity: f64) -> f64 {
    if consistency == 0.0 {
        0.0
    } else {
        consistency * specificity
    }
}

fn rank(mut scores: Vec<FormScore>) -> Vec<FormScore> {
    scores.sort_by(|a, b| b.product.total_cmp(&a.product).then(a.neuron.cmp(&b.neuron)));
    scores
}

/// Per-layer sums needed to contrast one word against the rest.
struct LayerTotals {
    n: usize,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

fn own_ids(w: &WordEntry) -> Vec<usize> {
    w.own_sentence_ids()
}

fn totals(m: &Matrix, words: &[WordEntry]) -> LayerTotals {
    let mut t = LayerTotals {
        n: 0,
        sum: vec![0.0; m.cols()],
        sumsq: vec![0.0; m.cols()],
    };
    for w in words {
        for i in own_ids(w) {
            t.n += 1;
            for ((s, q), &x) in t.sum.iter_mut().zip(t.sumsq.iter_mut()).zip(m.row(i)) {
                let x = x as f64;
                *s += x;
                *q += x * x;
            }
        }
    }
    t
}

fn ranking_with_totals(m: &Matrix, w: &WordEntry, layer: usize, k: usize, t: &LayerTotals) -> Result<FormDetectorRanking> {
    let ids = own_ids(w);
    if ids.len() < 4 {
        return Err(LexError::InvalidInput(format!(
            "{}: form detectors need 4 sentences (have {})",
            w.key(),
            ids.len()
        )));
    }
    let own = column_moments(m, &ids);
    let n_other = t.n - ids.len();
    let scores = own
        .iter()
        .enumerate()
        .map(|(j, mw)| {
            let sum_w = mw.mean * mw.n as f64;
            let sumsq_w = mw.var * (mw.n - 1) as f64 + mw.n as f64 * mw.mean * mw.mean;
            let so = t.sum[j] - sum_w;
            let qo = t.sumsq[j] - sumsq_w;
            let mean_o = so / n_other as f64;
            let var_o = ((qo - n_other as f64 * mean_o * mean_o) / (n_other - 1) as f64).max(0.0);
            let other = Moments {
                n: n_other,
                mean: mean_o,
                var: var_o,
            };
            let spec = stats::standardized_difference(*mw, other)?;
            let c = consistency(*mw);
            Ok(FormScore {
                neuron: j,
                consistency: c,
                specificity: spec,
                product: product(c, spec),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FormDetectorRanking {
        word: w.key(),
        layer,
        k,
        ranked: rank(scores),
    })
}

fn check_contrast(store: &ActivationStore) -> Result<()> {
    let n = store.manifest().words.len();
    if n < 3 {
        return Err(LexError::InvalidInput(format!(
            "form detectors need at least 2 contrast words (manifest has {n} words)"
        )));
    }
    Ok(())
}

pub fn form_detectors(store: &ActivationStore, word: &str, layer: usize, site: &str, k: usize) -> Result<FormDetectorRanking> {
    check_contrast(store)?;
    let m = store.matrix(site, layer)?;
    let t = totals(&m, &store.manifest().words);
    ranking_with_totals(&m, word_entry(store, word)?, layer, k, &t)
}

/// Rankings for every word with at least 4 own sentences, in manifest order.
pub fn form_detectors_layer(store: &ActivationStore, layer: usize, site: &str, k: usize) -> Result<Vec<FormDetectorRanking>> {
    check_contrast(store)?;
    let m = store.matrix(site, layer)?;
    let words = &store.manifest().words;
    let t = totals(&m, words);
    words
        .par_iter()
        .filter(|w| own_ids(w).len() >= 4)
        .map(|w| ranking_with_totals(&m, w, layer, k, &t))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormBlindOverlap {
    pub n_form: usize,
    pub blind_fraction: f64,
    pub selective_fraction: f64,
}

/// Share of the top-K form detectors that are sense-blind or sense-selective.
pub fn form_blind_overlap(c: &NeuronClassification, r: &FormDetectorRanking) -> Result<FormBlindOverlap> {
    if c.word != r.word || c.layer != r.layer {
        return Err(LexError::InvalidInput(format!(
            "classification {}@{} and ranking {}@{} do not match",
            c.word, c.layer, r.word, r.layer
        )));
    }
    let top = r.top_neurons();
    let blind: BTreeSet<usize> = c.blind.iter().copied().collect();
    let sel: BTreeSet<usize> = c.selective.iter().copied().collect();
    let n = top.len();
    let frac = |set: &BTreeSet<usize>| {
        if n == 0 {
            0.0
        } else {
            top.iter().filter(|j| set.contains(j)).count() as f64 / n as f64
        }
    };
    Ok(FormBlindOverlap {
        n_form: n,
        blind_fraction: frac(&blind),
        selective_fraction: frac(&sel),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectiveFractions {
    pub layer: usize,
    /// Mean over words of the fraction of neurons selective for that word.
    pub per_word_mean: f64,
    /// Fraction of neurons selective for at least one word.
    pub union: f64,
}

pub fn selective_fractions(layer: usize, d: usize, classes: &[NeuronClassification]) -> SelectiveFractions {
    let fr: Vec<f64> = classes.iter().map(|c| c.selective.len() as f64 / d as f64).collect();
    let union: BTreeSet<usize> = classes.iter().flat_map(|c| c.selective.iter().copied()).collect();
    SelectiveFractions {
        layer,
        per_word_mean: if fr.is_empty() { 0.0 } else { stats::mean(&fr) },
        union: union.len() as f64 / d as f64,
    }
}

/// A per-neuron polysemanticity score in `[0, 1]` for one layer.
pub trait PolysemyScorer: Sync {
    fn name(&self) -> &str;
    fn score(&self, store: &ActivationStore, layer: usize, site: &str) -> Result<Vec<f64>>;
}

/// Concepts are (word, sense) clusters of sense-A / sense-B sentences. A
/// neuron responds to a concept when the concept's mean activation exceeds
/// the neuron's `quantile` over all those sentences; the score is
/// `max(0, responding - 1) / (concepts - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileConceptScorer {
    pub quantile: f64,
}

impl Default for QuantileConceptScorer {
    fn default() -> Self {
        QuantileConceptScorer {
            quantile: DEFAULT_QUANTILE,
        }
    }
}

impl QuantileConceptScorer {
    pub fn score_matrix(&self, m: &Matrix, words: &[WordEntry]) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&self.quantile) {
            return Err(LexError::InvalidInput(format!("quantile {} outside [0, 1]", self.quantile)));
        }
        let concepts: Vec<Vec<usize>> = words
            .iter()
            .flat_map(|w| [w.sentence_ids(SenseLabel::A), w.sentence_ids(SenseLabel::B)])
            .filter(|ids| !ids.is_empty())
            .collect();
        if concepts.len() < 2 {
            return Err(LexError::InvalidInput(format!(
                "polysemanticity needs 2 concepts (have {})",
                concepts.len()
            )));
        }
        let all: Vec<usize> = concepts.iter().flatten().copied().collect();
        let means: Vec<Vec<f64>> = concepts.iter().map(|ids| column_moments(m, ids).iter().map(|x| x.mean).collect()).collect();
        let denom = (concepts.len() - 1) as f64;
        Ok((0..m.cols())
            .into_par_iter()
            .map(|j| {
                let mut col: Vec<f64> = all.iter().map(|&i| m.row(i)[j] as f64).collect();
                col.sort_by(f64::total_cmp);
                let thr = stats::quantile_sorted(&col, self.quantile);
                let hits = means.iter().filter(|mu| mu[j] > thr).count();
                hits.saturating_sub(1) as f64 / denom
            })
            .collect())
    }
}

impl PolysemyScorer for QuantileConceptScorer {
    fn name(&self) -> &str {
        "quantile_concept"
    }

    fn score(&self, store: &ActivationStore, layer: usize, site: &str) -> Result<Vec<f64>> {
        let m = store.matrix(site, layer)?;
        self.score_matrix(&m, &store.manifest().words)
    }
}

pub fn raw_polysemanticity(store: &ActivationStore, layer: usize, site: &str, quantile: f64) -> Result<Vec<f64>> {
    QuantileConceptScorer { quantile }.score(store, layer, site)
}

/// `F_j = 1` for neurons in the top-K of any word's ranking.
pub fn form_flags(d: usize, rankings: &[FormDetectorRanking]) -> Vec<bool> {
    let mut flags = vec![false; d];
    for r in rankings {
        for j in r.top_neurons() {
            flags[j] = true;
        }
    }
    flags
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolysemyScore {
    pub neuron: usize,
    pub p_raw: f64,
    pub form_flag: bool,
    pub p_adj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedScores {
    pub r_lex: f64,
    pub mean_p_raw: f64,
    /// `max(0, r_lex * mean_p_raw)`.
    pub lambda: f64,
    pub flag_threshold: f64,
    pub scores: Vec<PolysemyScore>,
    /// Neurons flagged polysemantic by `p_raw` but not by `p_adj`.
    pub reclassified: Vec<usize>,
}

pub fn mean_p(p_raw: &[f64]) -> f64 {
    stats::mean(p_raw)
}

/// `p_adj = max(0, p_raw - lambda F)` with `lambda = r_lex * mean_p`. A
/// negative product is clamped to 0 so that adjustment never raises a score.
pub fn adjusted_score(p_raw: &[f64], form_flags: &[bool], r_lex: f64, mean_p_layer: f64, flag_threshold: f64) -> Result<AdjustedScores> {
    if p_raw.len() != form_flags.len() {
        return Err(LexError::DimensionMismatch(format!(
            "{} scores but {} form flags",
            p_raw.len(),
            form_flags.len()
        )));
    }
    if !r_lex.is_finite() {
        return Err(LexError::InvalidInput("R_lex must be finite".into()));
    }
    let lambda = (r_lex * mean_p_layer).max(0.0);
    let scores: Vec<PolysemyScore> = p_raw
        .iter()
        .zip(form_flags)
        .enumerate()
        .map(|(j, (&p, &f))| PolysemyScore {
            neuron: j,
            p_raw: p,
            form_flag: f,
            p_adj: if f { (p - lambda).max(0.0) } else { p },
        })
        .collect();
    let reclassified = scores
        .iter()
        .filter(|s| s.p_raw >= flag_threshold && s.p_adj < flag_threshold)
        .map(|s| s.neuron)
        .collect();
    Ok(AdjustedScores {
        r_lex,
        mean_p_raw: mean_p_layer,
        lambda,
        flag_threshold,
        scores,
        reclassified,
    })
}

fn fmt_real(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x}")
    }
}

/// `word,layer,neuron,ssi,signed,mean_abs_activation`.
pub fn ssi_csv(vectors: &[SsiVector]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["word", "layer", "neuron", "ssi", "signed", "mean_abs_activation"])?;
    for v in vectors {
        for j in 0..v.values.len() {
            w.write_record([
                v.word.clone(),
                v.layer.to_string(),
                j.to_string(),
                fmt_real(v.values[j]),
                fmt_real(v.signed[j]),
                fmt_real(v.mean_abs_activation[j]),
            ])?;
        }
    }
    w.into_inner().map_err(|e| LexError::InvalidInput(e.to_string()))
}

/// `word,layer,neuron,class` with class one of selective_a, selective_b, blind.
pub fn classification_csv(classes: &[NeuronClassification]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["word", "layer", "neuron", "class"])?;
    for c in classes {
        for (name, set) in [("selective_a", &c.selective_a), ("selective_b", &c.selective_b), ("blind", &c.blind)] {
            for j in set {
                w.write_record([c.word.clone(), c.layer.to_string(), j.to_string(), name.to_string()])?;
            }
        }
    }
    w.into_inner().map_err(|e| LexError::InvalidInput(e.to_string()))
}

/// `word,layer,rank,neuron,consistency,specificity,product`, top-K rows only.
pub fn ranking_csv(rankings: &[FormDetectorRanking]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["word", "layer", "rank", "neuron", "consistency", "specificity", "product"])?;
    for r in rankings {
        for (i, s) in r.top().iter().enumerate() {
            w.write_record([
                r.word.clone(),
                r.layer.to_string(),
                (i + 1).to_string(),
                s.neuron.to_string(),
                fmt_real(s.consistency),
                fmt_real(s.specificity),
                fmt_real(s.product),
            ])?;
        }
    }
    w.into_inner().map_err(|e| LexError::InvalidInput(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::manifest::{self, LinkSource, Manifest, PartOfSpeech, SentenceRecord, SiteDescriptor};
    use crate::store::MatrixKey;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    /// Words with `per_sense` A and B sentences each; `value(word, sense, rep, neuron)`.
    fn store_from(n_words: usize, per_sense: usize, d: usize, value: impl Fn(usize, usize, usize, usize) -> f32) -> ActivationStore {
        let mut words = Vec::new();
        let mut rows = Vec::new();
        let mut next = 0;
        for wi in 0..n_words {
            let mut sentences = Vec::new();
            for (si, sense) in [SenseLabel::A, SenseLabel::B].into_iter().enumerate() {
                for rep in 0..per_sense {
                    sentences.push(SentenceRecord {
                        sentence_id: next,
                        sense,
                        target_token_index: 0,
                        text: None,
                    });
                    next += 1;
                    rows.push((0..d).map(|j| value(wi, si, rep, j)).collect::<Vec<f32>>());
                }
            }
            words.push(WordEntry {
                lemma: format!("w{wi}"),
                pos: PartOfSpeech::Noun,
                sense_a_id: "a".into(),
                sense_b_id: "b".into(),
                sentences,
                synonym_a: None,
                synonym_b: None,
                wup_similarity: 0.1,
                link_source: LinkSource::Wordnet,
            });
        }
        let manifest = Manifest {
            model_name: "t".into(),
            n_layers: 1,
            sites: vec![SiteDescriptor {
                site_id: manifest::SITE_MLP.into(),
                dim_per_layer: vec![d],
            }],
            words,
            format_version: manifest::FORMAT_VERSION,
            seed_note: String::new(),
        };
        let m = Matrix::from_rows(d, &rows).unwrap();
        ActivationStore::from_parts(manifest, BTreeMap::from([(MatrixKey::new(manifest::SITE_MLP, 0), m)])).unwrap()
    }

    const SITE: &str = manifest::SITE_MLP;

    #[test]
    fn ssi_sentinel_and_null() {
        // Neuron 0: 1 on A, 0 on B. Neuron 1: same alternating values in both senses.
        let s = store_from(1, 4, 2, |_, si, rep, j| match j {
            0 => (si == 0) as u8 as f32,
            _ => (rep % 2) as f32,
        });
        let v = ssi(&s, "w0.n", 0, SITE).unwrap();
        assert_eq!(v.values[0], f64::INFINITY);
        assert_eq!(v.values[1], 0.0);
        let c = classify(&v, &Thresholds::default());
        assert_eq!(c.selective, vec![0]);
        assert_eq!(c.selective_a, vec![0]);
    }

    fn vector(values: &[f64], mean_abs: &[f64]) -> SsiVector {
        SsiVector {
            word: "w.n".into(),
            layer: 0,
            values: values.to_vec(),
            signed: values.iter().map(|x| -x).collect(),
            mean_abs_activation: mean_abs.to_vec(),
        }
    }

    #[test]
    fn classify_rule_examples() {
        // Low-activation neurons keep the median below the three under test.
        let v = vector(&[3.0, 0.2, 1.0, 0.0, 0.0, 0.0, 0.0], &[5.0, 5.0, 5.0, 0.1, 0.1, 0.1, 0.1]);
        let c = classify(&v, &Thresholds::default());
        assert_eq!(c.selective, vec![0]);
        assert_eq!(c.selective_b, vec![0]);
        assert_eq!(c.blind, vec![1]);
        let v = vector(&[0.2, 0.2, 0.2], &[0.1, 1.0, 2.0]);
        assert_eq!(classify(&v, &Thresholds::default()).blind, vec![2]);
    }

    #[test]
    fn form_detector_exact_case() {
        // Neuron 0 is 1 on w0 and 0 on every other word.
        let s = store_from(3, 3, 3, |wi, _, rep, j| match j {
            0 => (wi == 0) as u8 as f32,
            1 => 1.0 + rep as f32,
            _ => (wi * 3 + rep) as f32,
        });
        let r = form_detectors(&s, "w0.n", 0, SITE, 2).unwrap();
        let best = r.ranked[0];
        assert_eq!(best.neuron, 0);
        assert_eq!(best.consistency, 1.0);
        assert_eq!(best.specificity, f64::INFINITY);
        // Neuron 1 is identical across words: specificity 0.
        let n1 = r.ranked.iter().find(|x| x.neuron == 1).unwrap();
        assert_abs_diff_eq!(n1.specificity, 0.0, epsilon = 1e-12);
        assert!(form_detectors(&store_from(2, 3, 2, |_, _, _, _| 1.0), "w0.n", 0, SITE, 1).is_err());
    }

    #[test]
    fn form_specificity_matches_direct_cohens_d() {
        let s = store_from(4, 3, 2, |wi, si, rep, j| ((wi * 7 + si * 3 + rep * 5 + j) % 11) as f32 * 0.3);
        let r = form_detectors(&s, "w1.n", 0, SITE, 2).unwrap();
        let m = s.matrix(SITE, 0).unwrap();
        let w1: Vec<f64> = s.manifest().words[1].own_sentence_ids().iter().map(|&i| m.row(i)[0] as f64).collect();
        let rest: Vec<f64> = s
            .manifest()
            .words
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 1)
            .flat_map(|(_, w)| w.own_sentence_ids())
            .map(|i| m.row(i)[0] as f64)
            .collect();
        let direct = stats::standardized_difference(Moments::of(&w1), Moments::of(&rest)).unwrap();
        let got = r.ranked.iter().find(|x| x.neuron == 0).unwrap().specificity;
        assert_abs_diff_eq!(got, direct, epsilon = 1e-9);
    }

    #[test]
    fn consistency_conventions() {
        assert_eq!(consistency(Moments { n: 3, mean: 1e-7, var: 0.0 }), 0.0);
        assert_eq!(consistency(Moments { n: 3, mean: 1.0, var: 4.0 }), 0.0);
        assert_abs_diff_eq!(consistency(Moments { n: 3, mean: -2.0, var: 1.0 }), 0.5);
    }

    #[test]
    fn polysemanticity_examples() {
        // 5 words x 2 senses = 10 concepts; neuron 0 fires for one concept,
        // neuron 1 for everything, neuron 2 for two concepts.
        let s = store_from(5, 4, 3, |wi, si, _, j| match j {
            0 => if wi == 0 && si == 0 { 8.0 } else { 0.0 },
            1 => 1.0,
            _ => if wi == 2 { 8.0 } else { 0.0 },
        });
        let p = raw_polysemanticity(&s, 0, SITE, 0.75).unwrap();
        assert_eq!(p[0], 0.0);
        // A constant neuron never exceeds its own quantile.
        assert_eq!(p[1], 0.0);
        assert_abs_diff_eq!(p[2], 1.0 / 9.0, epsilon = 1e-12);
        // With one cluster per word, two clusters of five give 1/4.
        let per_word = store_from(5, 4, 1, |wi, _, _, _| if wi < 2 { 8.0 } else { 0.0 });
        let words: Vec<WordEntry> = per_word
            .manifest()
            .words
            .iter()
            .map(|w| WordEntry {
                sentences: w.sentences.iter().map(|s| SentenceRecord { sense: SenseLabel::A, ..s.clone() }).collect(),
                ..w.clone()
            })
            .collect();
        let m = per_word.matrix(SITE, 0).unwrap();
        let p = QuantileConceptScorer { quantile: 0.5 }.score_matrix(&m, &words).unwrap();
        assert_abs_diff_eq!(p[0], 0.25, epsilon = 1e-12);
        // Equally and strongly active on all concepts except a low tail.
        let all = store_from(5, 4, 1, |_, _, rep, _| if rep == 0 { 0.0 } else { 1.0 + rep as f32 });
        let p = raw_polysemanticity(&all, 0, SITE, 0.2).unwrap();
        assert_eq!(p[0], 1.0);
    }

    #[test]
    fn adjusted_arithmetic() {
        let a = adjusted_score(&[0.5, 0.5], &[true, false], 0.4, 0.5, 0.5).unwrap();
        assert_eq!(a.lambda, 0.4 * 0.5);
        assert_eq!(a.scores[0].p_adj, 0.5 - 0.4 * 0.5);
        assert_eq!(a.scores[1].p_adj, 0.5);
        assert_eq!(a.reclassified, vec![0]);
        let neg = adjusted_score(&[0.5], &[true], -0.4, 0.5, 0.5).unwrap();
        assert_eq!(neg.lambda, 0.0);
        assert_eq!(neg.scores[0].p_adj, 0.5);
    }

    proptest! {
        #[test]
        fn adjustment_never_raises_and_is_monotone(
            p in prop::collection::vec(0.0f64..1.0, 1..30),
            seed in any::<u64>(),
            r1 in -1.0f64..1.0, r2 in -1.0f64..1.0,
        ) {
            let flags: Vec<bool> = (0..p.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let mp = mean_p(&p);
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let a = adjusted_score(&p, &flags, lo, mp, 0.5).unwrap();
            let b = adjusted_score(&p, &flags, hi, mp, 0.5).unwrap();
            for s in &a.scores {
                prop_assert!(s.p_adj <= s.p_raw);
            }
            let sa: BTreeSet<usize> = a.reclassified.iter().copied().collect();
            let sb: BTreeSet<usize> = b.reclassified.iter().copied().collect();
            prop_assert!(sa.is_subset(&sb));
        }

        #[test]
        fn ssi_affine_invariant(shift in -5.0f32..5.0, scale in 0.25f32..4.0) {
            let base = |_: usize, si: usize, rep: usize, j: usize| ((si * 5 + rep * 3 + j) % 7) as f32;
            let s1 = store_from(1, 5, 3, base);
            let s2 = store_from(1, 5, 3, |a, b, c, d| base(a, b, c, d) * scale + shift);
            let v1 = ssi(&s1, "w0.n", 0, SITE).unwrap();
            let v2 = ssi(&s2, "w0.n", 0, SITE).unwrap();
            for (x, y) in v1.values.iter().zip(&v2.values) {
                prop_assert!((x - y).abs() < 1e-3 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn ranking_invariant_under_rescaling(scale in 0.1f32..10.0) {
            let base = |wi: usize, si: usize, rep: usize, j: usize| ((wi * 7 + si * 3 + rep * 5 + j * 2) % 13) as f32 + (j == 1) as u8 as f32 * 20.0 * (wi == 0) as u8 as f32;
            let a = form_detectors(&store_from(4, 4, 4, base), "w0.n", 0, SITE, 4).unwrap();
            let b = form_detectors(&store_from(4, 4, 4, |w, s, r, j| base(w, s, r, j) * scale), "w0.n", 0, SITE, 4).unwrap();
            let na: Vec<usize> = a.ranked.iter().map(|x| x.neuron).collect();
            let nb: Vec<usize> = b.ranked.iter().map(|x| x.neuron).collect();
            prop_assert_eq!(na, nb);
        }
    }

    #[test]
    fn overlap_fractions() {
        let c = NeuronClassification {
            word: "w.n".into(),
            layer: 0,
            selective: vec![3],
            selective_a: vec![3],
            selective_b: vec![],
            blind: vec![0, 1],
        };
        let r = FormDetectorRanking {
            word: "w.n".into(),
            layer: 0,
            k: 2,
            ranked: [0, 1, 3]
                .iter()
                .map(|&n| FormScore { neuron: n, consistency: 1.0, specificity: 1.0, product: 1.0 })
                .collect(),
        };
        let o = form_blind_overlap(&c, &r).unwrap();
        assert_eq!((o.blind_fraction, o.selective_fraction), (1.0, 0.0));
        let r3 = FormDetectorRanking { k: 3, ..r.clone() };
        let o = form_blind_overlap(&c, &r3).unwrap();
        assert_abs_diff_eq!(o.selective_fraction, 1.0 / 3.0);
    }

    #[test]
    fn fractions_two_ways() {
        let mk = |sel: Vec<usize>| NeuronClassification {
            word: "w".into(),
            layer: 0,
            selective: sel,
            selective_a: vec![],
            selective_b: vec![],
            blind: vec![],
        };
        let f = selective_fractions(0, 10, &[mk(vec![0, 1]), mk(vec![1, 2])]);
        assert_abs_diff_eq!(f.per_word_mean, 0.2);
        assert_abs_diff_eq!(f.union, 0.3);
    }
}
