// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sense collisions in sparse-autoencoder features: features active for a
//! word that fire for both of its senses with indistinguishable magnitude.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LexError, Result};
use crate::stats::{self, Moments};
use crate::store::manifest::{SenseLabel, SITE_SAE};
use crate::store::{ActivationStore, Matrix};

pub const FIRING_RATE_MIN: f64 = 0.30;
pub const BLIND_D_MAX: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionThresholds {
    /// A feature is active for a word when it fires on more than this
    /// fraction of one sense's sentences.
    pub firing_rate_min: f64,
    /// Blind features fire above `firing_rate_min` in both senses and have
    /// `|d|` below this, computed over all sentences of both senses.
    pub blind_d_max: f64,
}

impl Default for CollisionThresholds {
    fn default() -> Self {
        CollisionThresholds {
            firing_rate_min: FIRING_RATE_MIN,
            blind_d_max: BLIND_D_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSets {
    pub word: String,
    pub layer: usize,
    pub active: Vec<usize>,
    pub blind: Vec<usize>,
}

pub fn feature_stats_matrix(m: &Matrix, word: &crate::store::WordEntry, layer: usize, t: &CollisionThresholds) -> Result<FeatureSets> {
    if let Some(v) = m.as_slice().iter().find(|v| v.is_nan() || **v < 0.0) {
        return Err(LexError::InvalidInput(format!("SAE feature activations must be nonnegative (found {v})")));
    }
    let ids_a = word.sentence_ids(SenseLabel::A);
    let ids_b = word.sentence_ids(SenseLabel::B);
    if ids_a.is_empty() || ids_b.is_empty() {
        return Err(LexError::InvalidInput(format!("word {} lacks sentences for one sense", word.key())));
    }
    let mut active = Vec::new();
    let mut blind = Vec::new();
    let rate = |ids: &[usize], j: usize| ids.iter().filter(|&&i| m.row(i)[j] > 0.0).count() as f64 / ids.len() as f64;
    for j in 0..m.cols() {
        let (ra, rb) = (rate(&ids_a, j), rate(&ids_b, j));
        if ra <= t.firing_rate_min && rb <= t.firing_rate_min {
            continue;
        }
        active.push(j);
        if ra > t.firing_rate_min && rb > t.firing_rate_min {
            let va: Vec<f64> = ids_a.iter().map(|&i| m.row(i)[j] as f64).collect();
            let vb: Vec<f64> = ids_b.iter().map(|&i| m.row(i)[j] as f64).collect();
            let d = stats::standardized_difference(Moments::of(&va), Moments::of(&vb))?;
            if d.abs() < t.blind_d_max {
                blind.push(j);
            }
        }
    }
    Ok(FeatureSets { word: word.key(), layer, active, blind })
}

pub fn feature_stats(store: &ActivationStore, word: &str, layer: usize, t: &CollisionThresholds) -> Result<FeatureSets> {
    let manifest = store.manifest();
    let w = manifest
        .word_index(word)
        .map(|i| &manifest.words[i])
        .ok_or_else(|| LexError::InvalidInput(format!("word {word} not in manifest")))?;
    let m = store.matrix(SITE_SAE, layer)?;
    feature_stats_matrix(&m, w, layer, t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionLayer {
    pub layer: usize,
    pub mean_active: f64,
    pub mean_blind: f64,
    /// `mean_blind / mean_active`; absent when no word has active features.
    pub ratio: Option<f64>,
    pub dictionary_size: usize,
    pub n_words: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub thresholds: CollisionThresholds,
    pub both_senses_rule: String,
    pub effect_size_rows: String,
    pub layers: Vec<CollisionLayer>,
}

pub fn collision_report(store: &ActivationStore, layers: &[usize], t: &CollisionThresholds) -> Result<CollisionReport> {
    let words = &store.manifest().words;
    if words.is_empty() {
        return Err(LexError::InvalidInput("manifest lists no words".into()));
    }
    let out = layers
        .iter()
        .map(|&layer| {
            let m = store.matrix(SITE_SAE, layer)?;
            let sets = words
                .par_iter()
                .map(|w| feature_stats_matrix(&m, w, layer, t))
                .collect::<Result<Vec<_>>>()?;
            let n = sets.len() as f64;
            let mean_active = sets.iter().map(|s| s.active.len() as f64).sum::<f64>() / n;
            let mean_blind = sets.iter().map(|s| s.blind.len() as f64).sum::<f64>() / n;
            Ok(CollisionLayer {
                layer,
                mean_active,
                mean_blind,
                ratio: (mean_active > 0.0).then(|| mean_blind / mean_active),
                dictionary_size: m.cols(),
                n_words: sets.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CollisionReport {
        thresholds: *t,
        both_senses_rule: format!("firing rate > {} in each sense", t.firing_rate_min),
        effect_size_rows: "all sentences of both senses".into(),
        layers: out,
    })
}

/// `layer,active,blind,collision_pct,dictionary_size`.
pub fn collision_csv(r: &CollisionReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "active", "blind", "collision_pct", "dictionary_size"])?;
    for l in &r.layers {
        w.write_record([
            l.layer.to_string(),
            format!("{}", l.mean_active),
            format!("{}", l.mean_blind),
            l.ratio.map(|x| format!("{}", 100.0 * x)).unwrap_or_default(),
            l.dictionary_size.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| LexError::InvalidInput(e.to_string()))
}
