// SPDX-License-Identifier: MIT OR Apache-2.0

//! Score cards comparing pipeline outputs on a synthetic store with the
//! ground truth it was generated from.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decompose;
use crate::error::{LexError, Result};
use crate::lis::{self, LisModel};
use crate::neurons::{self, Thresholds};
use crate::overlap::Metric;
use crate::pairing::{self, PairConfig};
use crate::store::manifest::LinkSource;
use crate::store::ActivationStore;
use crate::synth::GroundTruth;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleThresholds {
    pub selective_recall_min: f64,
    pub selective_fp_max: f64,
    pub form_recall_min: f64,
    pub r_lex_error_max: f64,
    pub interaction_max: f64,
    pub lis_overlap_min: f64,
}

impl Default for OracleThresholds {
    fn default() -> Self {
        OracleThresholds {
            selective_recall_min: 0.95,
            selective_fp_max: 0.01,
            form_recall_min: 0.90,
            r_lex_error_max: 0.05,
            interaction_max: 0.02,
            lis_overlap_min: 0.90,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub top_k: usize,
    pub pairs: PairConfig,
    pub thresholds: OracleThresholds,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            top_k: neurons::DEFAULT_TOP_K,
            pairs: PairConfig::default(),
            thresholds: OracleThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// `"<= x"` or `">= x"`.
    pub bound: String,
    pub pass: bool,
}

impl Check {
    fn at_least(name: impl Into<String>, value: f64, min: f64) -> Check {
        Check { name: name.into(), value, bound: format!(">= {min}"), pass: value >= min }
    }

    fn at_most(name: impl Into<String>, value: f64, max: f64) -> Check {
        Check { name: name.into(), value, bound: format!("<= {max}"), pass: value <= max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    pub selective_recall: f64,
    pub selective_precision: Option<f64>,
    pub selective_fp_rate: f64,
    /// Share of planted form neurons inside each word's top-K ranking.
    pub form_recall: f64,
    pub form_precision: f64,
    pub rho: Option<f64>,
    pub r_lex: Option<f64>,
    pub r_lex_error: Option<f64>,
    pub interaction: Option<f64>,
    pub lis_overlap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub store_hash: String,
    pub top_k: usize,
    pub layers: Vec<LayerScore>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

pub fn oracle_check(store: &ActivationStore, truth: &GroundTruth, cfg: &OracleConfig) -> Result<ScoreCard> {
    let hash = store.content_hash()?;
    if hash != truth.store_hash {
        return Err(LexError::InvalidInput(format!(
            "mismatched store hash: store {hash}, ground truth {}",
            truth.store_hash
        )));
    }
    let site = truth.site.as_str();
    let d = truth.config.d;
    let layers: Vec<usize> = (0..truth.config.n_layers).collect();
    let pairs = pairing::build_all_pairs(store, &cfg.pairs)?;
    let dec = decompose::decompose_layers(store, &pairs, site, &layers, Metric::Cosine, None)?;
    let planted_lis = LisModel::from_basis(0, site, truth.lis_basis.clone());

    let scores = layers
        .par_iter()
        .map(|&layer| {
            let (mut hit, mut planted, mut fp, mut negatives, mut called) = (0usize, 0usize, 0usize, 0usize, 0usize);
            let (mut form_hit, mut form_planted, mut form_ranked) = (0usize, 0usize, 0usize);
            for w in &truth.words {
                let v = neurons::ssi(store, &w.word, layer, site)?;
                let c = neurons::classify(&v, &Thresholds::default());
                let sel = w.selective();
                hit += c.selective.iter().filter(|j| sel.binary_search(j).is_ok()).count();
                fp += c.selective.len() - c.selective.iter().filter(|j| sel.binary_search(j).is_ok()).count();
                planted += sel.len();
                negatives += d - sel.len();
                called += c.selective.len();
                let r = neurons::form_detectors(store, &w.word, layer, site, cfg.top_k)?;
                let top = r.top_neurons();
                form_hit += w.form_neurons.iter().filter(|j| top.contains(j)).count();
                form_planted += w.form_neurons.len();
                form_ranked += top.len();
            }
            let ld = dec.layer(layer);
            let rho = truth.rho.get(layer).copied().flatten();
            let r_lex = ld.and_then(|l| l.r_lex).map(|e| e.value);
            let lis_overlap = if truth.lis_basis.is_empty() {
                None
            } else {
                match lis::difference_vectors(store, layer, site, LinkSource::Wordnet) {
                    Ok(dv) => Some(lis::subspace_overlap(&lis::fit_lis(&dv, truth.lis_basis.len())?, &planted_lis)?),
                    Err(LexError::NoSynonymCoverage(_)) => None,
                    Err(e) => return Err(e),
                }
            };
            let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            Ok(LayerScore {
                layer,
                selective_recall: ratio(hit, planted),
                selective_precision: (called > 0).then(|| ratio(hit, called)),
                selective_fp_rate: ratio(fp, negatives),
                form_recall: ratio(form_hit, form_planted),
                form_precision: ratio(form_hit, form_ranked),
                rho,
                r_lex,
                r_lex_error: rho.zip(r_lex).map(|(a, b)| (a - b).abs()),
                interaction: ld.and_then(|l| l.interaction),
                lis_overlap,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let t = &cfg.thresholds;
    let mut checks = Vec::new();
    for s in &scores {
        let l = s.layer;
        checks.push(Check::at_least(format!("layer {l} selective recall"), s.selective_recall, t.selective_recall_min));
        checks.push(Check::at_most(format!("layer {l} selective false-positive rate"), s.selective_fp_rate, t.selective_fp_max));
        checks.push(Check::at_least(format!("layer {l} form top-{} recall", cfg.top_k), s.form_recall, t.form_recall_min));
        if let Some(e) = s.r_lex_error {
            checks.push(Check::at_most(format!("layer {l} |R_lex - rho|"), e, t.r_lex_error_max));
        }
        if let Some(i) = s.interaction {
            checks.push(Check::at_most(format!("layer {l} |interaction|"), i.abs(), t.interaction_max));
        }
        if let Some(o) = s.lis_overlap {
            checks.push(Check::at_least(format!("layer {l} LIS overlap"), o, t.lis_overlap_min));
        }
    }
    Ok(ScoreCard {
        store_hash: hash,
        top_k: cfg.top_k,
        pass: checks.iter().all(|c| c.pass),
        layers: scores,
        checks,
    })
}
