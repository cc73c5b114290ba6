// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic stores with planted ground truth.
//!
//! For word `w`, sense `z` and layer `k`, a sentence row is
//! `l_k f(w) + s_k g(w, z) + noise`, where
//!
//! * `f(w)` puts `form_share` of its energy on `w`'s form neurons (equal
//!   positive weights) and the rest on a direction `c_w` of a lexical
//!   subspace shared by all words,
//! * `g(w, z)` puts `1 - diffuse_share` of its energy on the half of `w`'s
//!   selective neurons that belongs to `z`, and the rest on a random dense
//!   direction over the background neurons,
//! * noise is i.i.d. `Normal(0, noise_sigma^2)`.
//!
//! `f` and `g` both have norm `signal_norm` and are orthogonal for the same
//! word. Synonym rows keep the sense's `g` but replace `f(w)` with a pure
//! lexical-subspace direction orthogonal to `c_w`.
//!
//! In expectation the dot products of two rows are `l^2 + s^2` (same lemma
//! and sense), `l^2` (other sense), `s^2` (synonym) and about 0 (unrelated
//! words), so the lexical ratio recovered from cosine overlaps is
//! `(l^2 - s^2) / (l^2 + s^2)`. That quantity is what [`GroundTruth::rho`]
//! reports and what [`SynthConfig::for_rho`] targets.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LexError, Result};
use crate::rng::{self, StreamRng};
use crate::store::manifest::{
    self, LinkSource, Manifest, PartOfSpeech, SenseLabel, SentenceRecord, SiteDescriptor, WordEntry,
};
use crate::store::{ActivationStore, Matrix, MatrixKey};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_words: usize,
    pub sentences_per_sense: usize,
    /// Synonym sentences per sense; 0 leaves every word without synonym links.
    pub synonym_sentences_per_sense: usize,
    pub d: usize,
    pub n_layers: usize,
    pub form_neurons_per_word: usize,
    /// Split evenly between the two senses (sense A gets the odd one).
    pub selective_neurons_per_word: usize,
    pub lexical_strength: f64,
    pub semantic_strength: f64,
    /// Per-layer `(l, s)`; overrides the two scalars when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_strengths: Option<Vec<(f64, f64)>>,
    pub lis_dim: usize,
    pub noise_sigma: f64,
    pub signal_norm: f64,
    pub form_share: f64,
    pub diffuse_share: f64,
    /// Also emit a single-layer `token_embedding` site (context-free: `l f(w)` plus noise).
    #[serde(default)]
    pub token_embedding: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::for_rho(0.5)
    }
}

impl SynthConfig {
    /// Default layout with `l^2 + s^2 = 1` and the given expected lexical ratio.
    pub fn for_rho(rho: f64) -> Self {
        let (l, s) = strengths_for_rho(rho);
        SynthConfig {
            n_words: 50,
            sentences_per_sense: 20,
            synonym_sentences_per_sense: 20,
            d: 512,
            n_layers: 2,
            form_neurons_per_word: 4,
            selective_neurons_per_word: 4,
            lexical_strength: l,
            semantic_strength: s,
            layer_strengths: None,
            lis_dim: 20,
            noise_sigma: 0.1,
            signal_norm: 4.0,
            form_share: 0.04,
            diffuse_share: 0.05,
            token_embedding: false,
            seed: 42,
        }
    }

    /// Named presets understood by the CLI.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(SynthConfig::default()),
            "small" => Ok(SynthConfig {
                n_words: 12,
                sentences_per_sense: 8,
                synonym_sentences_per_sense: 6,
                d: 128,
                lis_dim: 8,
                ..SynthConfig::default()
            }),
            "null" => Ok(SynthConfig::for_rho(0.0)),
            other => Err(LexError::InvalidInput(format!(
                "unknown synth preset {other:?} (expected default, small or null)"
            ))),
        }
    }

    pub fn strengths(&self, layer: usize) -> (f64, f64) {
        match &self.layer_strengths {
            Some(v) => v[layer],
            None => (self.lexical_strength, self.semantic_strength),
        }
    }

    /// Mean difference, in activation units, between the two senses at one
    /// planted selective neuron of sense A.
    pub fn selective_amplitude(&self, layer: usize) -> f64 {
        let (_, s) = self.strengths(layer);
        let half = self.selective_neurons_per_word.div_ceil(2).max(1);
        s * self.signal_norm * ((1.0 - self.diffuse_share) / half as f64).sqrt()
    }

    /// Activation of each planted form neuron before noise.
    pub fn form_amplitude(&self, layer: usize) -> f64 {
        let (l, _) = self.strengths(layer);
        l * self.signal_norm * (self.form_share / self.form_neurons_per_word.max(1) as f64).sqrt()
    }

    pub fn planted_per_word(&self) -> usize {
        self.form_neurons_per_word + self.selective_neurons_per_word
    }

    pub fn background_count(&self) -> usize {
        self.d.saturating_sub(self.n_words * self.planted_per_word())
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(LexError::InvalidInput(m));
        if self.n_words < 2 {
            return bad("synth needs at least 2 words".into());
        }
        if self.sentences_per_sense < 2 {
            return bad("synth needs at least 2 sentences per sense".into());
        }
        if self.n_layers < 1 {
            return bad("synth needs at least 1 layer".into());
        }
        if self.selective_neurons_per_word < 2 {
            return bad("need at least 2 selective neurons per word (one per sense)".into());
        }
        if self.n_words * self.planted_per_word() > self.d {
            return Err(LexError::OutOfRange(format!(
                "planted neurons ({} words x {}) exceed d = {}",
                self.n_words,
                self.planted_per_word(),
                self.d
            )));
        }
        if self.lis_dim > self.background_count() {
            return Err(LexError::OutOfRange(format!(
                "lexical subspace of dim {} does not fit in {} background neurons",
                self.lis_dim,
                self.background_count()
            )));
        }
        if let Some(v) = &self.layer_strengths {
            if v.len() != self.n_layers {
                return bad(format!("{} layer strengths for {} layers", v.len(), self.n_layers));
            }
        }
        for layer in 0..self.n_layers {
            let (l, s) = self.strengths(layer);
            if !(l >= 0.0 && s >= 0.0 && l.is_finite() && s.is_finite()) {
                return bad(format!("strengths must be finite and nonnegative (layer {layer})"));
            }
        }
        for (name, v) in [("form_share", self.form_share), ("diffuse_share", self.diffuse_share)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.form_neurons_per_word == 0 && self.form_share > 0.0 {
            return bad("form_share > 0 needs form neurons".into());
        }
        if self.lis_dim == 0 && self.form_share < 1.0 {
            return bad("lis_dim = 0 requires form_share = 1".into());
        }
        if self.lis_dim == 1 && self.synonym_sentences_per_sense > 0 && self.form_share < 1.0 {
            return bad("synonym directions need lis_dim >= 2".into());
        }
        if self.background_count() == 0 && self.diffuse_share > 0.0 {
            return bad("diffuse_share > 0 needs background neurons".into());
        }
        if !(self.noise_sigma >= 0.0 && self.signal_norm > 0.0) {
            return bad("noise_sigma must be >= 0 and signal_norm > 0".into());
        }
        Ok(())
    }
}

/// `(l, s)` on the unit circle with `(l^2 - s^2) / (l^2 + s^2) = rho`.
pub fn strengths_for_rho(rho: f64) -> (f64, f64) {
    let rho = rho.clamp(-1.0, 1.0);
    (((1.0 + rho) / 2.0).sqrt(), ((1.0 - rho) / 2.0).sqrt())
}

pub fn expected_rho(l: f64, s: f64) -> Option<f64> {
    let den = l * l + s * s;
    (den > 0.0).then(|| (l * l - s * s) / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedWord {
    pub word: String,
    pub form_neurons: Vec<usize>,
    pub selective_a: Vec<usize>,
    pub selective_b: Vec<usize>,
    /// Expected SSI of the planted selective neurons per layer; `None` when
    /// noise is zero (the SSI is infinite).
    pub target_ssi: Vec<Option<f64>>,
}

impl PlantedWord {
    pub fn selective(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.selective_a.iter().chain(&self.selective_b).copied().collect();
        v.sort_unstable();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub store_hash: String,
    pub site: String,
    /// Expected cosine-based lexical ratio per layer.
    pub rho: Vec<Option<f64>>,
    /// Expected lexical ratio without the synonym control, `l^2 / (l^2 + s^2)`.
    pub rho_no_syn: Vec<Option<f64>>,
    pub words: Vec<PlantedWord>,
    pub background: Vec<usize>,
    /// `lis_dim` orthonormal rows of length `d`.
    pub lis_basis: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn word(&self, key: &str) -> Option<&PlantedWord> {
        self.words.iter().find(|w| w.word == key)
    }

    pub fn lis_matrix(&self) -> Matrix {
        let rows: Vec<Vec<f32>> = self
            .lis_basis
            .iter()
            .map(|r| r.iter().map(|&x| x as f32).collect())
            .collect();
        Matrix::from_rows(self.config.d, &rows).expect("basis rows have length d")
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("ground truth serializes");
        out.push(b'\n');
        out
    }

    pub fn parse(name: &str, bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| LexError::format(name, format!("ground truth JSON: {e}")))
    }
}

pub fn word_lemma(i: usize) -> String {
    format!("w{i:03}")
}

fn unit_gaussian(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng::normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Unit vector orthogonal to the unit vector `c`.
fn orthogonal_unit(rng: &mut StreamRng, c: &[f64]) -> Vec<f64> {
    loop {
        let mut v = unit_gaussian(rng, c.len());
        let proj: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
        for (x, ci) in v.iter_mut().zip(c) {
            *x -= proj * ci;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

struct Layout {
    planted: Vec<PlantedWord>,
    background: Vec<usize>,
    /// lis_dim x d
    basis: Vec<Vec<f64>>,
    f: Vec<Vec<f64>>,
    f_syn: Vec<[Vec<f64>; 2]>,
    g: Vec<[Vec<f64>; 2]>,
}

fn layout(cfg: &SynthConfig) -> Layout {
    let mut rng = rng::stream_rng(cfg.seed, rng::named_stream(&["synth", "layout"]));
    let mut perm: Vec<usize> = (0..cfg.d).collect();
    perm.shuffle(&mut rng);
    let nf = cfg.form_neurons_per_word;
    let ns = cfg.selective_neurons_per_word;
    let half = ns.div_ceil(2);
    let mut planted = Vec::with_capacity(cfg.n_words);
    let mut next = 0;
    for i in 0..cfg.n_words {
        let mut take = |k: usize| {
            let mut v = perm[next..next + k].to_vec();
            next += k;
            v.sort_unstable();
            v
        };
        let form_neurons = take(nf);
        let selective_a = take(half);
        let selective_b = take(ns - half);
        let target_ssi = (0..cfg.n_layers)
            .map(|k| (cfg.noise_sigma > 0.0).then(|| cfg.selective_amplitude(k) / cfg.noise_sigma))
            .collect();
        planted.push(PlantedWord {
            word: format!("{}.n", word_lemma(i)),
            form_neurons,
            selective_a,
            selective_b,
            target_ssi,
        });
    }
    let mut background = perm[next..].to_vec();
    background.sort_unstable();
    let nb = background.len();

    let basis: Vec<Vec<f64>> = if cfg.lis_dim > 0 {
        let raw = DMatrix::from_fn(nb, cfg.lis_dim, |_, _| rng::normal(&mut rng));
        let q = raw.qr().q();
        (0..cfg.lis_dim)
            .map(|c| {
                let mut row = vec![0.0; cfg.d];
                for (r, &j) in background.iter().enumerate() {
                    row[j] = q[(r, c)];
                }
                row
            })
            .collect()
    } else {
        Vec::new()
    };
    let embed = |coef: &[f64]| -> Vec<f64> {
        let mut v = vec![0.0; cfg.d];
        for (c, row) in coef.iter().zip(&basis) {
            for (x, b) in v.iter_mut().zip(row) {
                *x += c * b;
            }
        }
        v
    };

    let r = cfg.signal_norm;
    let lex = (1.0 - cfg.form_share).sqrt() * r;
    let mut f = Vec::new();
    let mut f_syn = Vec::new();
    let mut g = Vec::new();
    for p in &planted {
        let mut wrng = rng::stream_rng(cfg.seed, rng::named_stream(&["synth", "word", &p.word]));
        let mut fw = vec![0.0; cfg.d];
        let mut syn = [vec![0.0; cfg.d], vec![0.0; cfg.d]];
        if cfg.lis_dim > 0 {
            let c = unit_gaussian(&mut wrng, cfg.lis_dim);
            fw = embed(&c).into_iter().map(|x| x * lex).collect();
            for slot in syn.iter_mut() {
                let cs = if cfg.lis_dim >= 2 { orthogonal_unit(&mut wrng, &c) } else { c.clone() };
                *slot = embed(&cs).into_iter().map(|x| x * r).collect();
            }
        }
        if nf > 0 {
            let a = cfg.form_share.sqrt() * r / (nf as f64).sqrt();
            for &j in &p.form_neurons {
                fw[j] += a;
            }
        }
        let mut gw = [vec![0.0; cfg.d], vec![0.0; cfg.d]];
        for (slot, set) in gw.iter_mut().zip([&p.selective_a, &p.selective_b]) {
            let a = (1.0 - cfg.diffuse_share).sqrt() * r / (set.len().max(1) as f64).sqrt();
            for &j in set {
                slot[j] = a;
            }
            if cfg.diffuse_share > 0.0 && nb > 0 {
                let dir = unit_gaussian(&mut wrng, nb);
                let a = cfg.diffuse_share.sqrt() * r;
                for (&j, x) in background.iter().zip(dir) {
                    slot[j] += a * x;
                }
            }
        }
        f.push(fw);
        f_syn.push(syn);
        g.push(gw);
    }
    Layout {
        planted,
        background,
        basis,
        f,
        f_syn,
        g,
    }
}

fn synth_manifest(cfg: &SynthConfig, sites: Vec<SiteDescriptor>, model_name: &str) -> Manifest {
    let mut next = 0;
    let mut words = Vec::with_capacity(cfg.n_words);
    let has_syn = cfg.synonym_sentences_per_sense > 0;
    for i in 0..cfg.n_words {
        let lemma = word_lemma(i);
        let mut sentences = Vec::new();
        let blocks = [
            (SenseLabel::A, cfg.sentences_per_sense),
            (SenseLabel::B, cfg.sentences_per_sense),
            (SenseLabel::SynA, cfg.synonym_sentences_per_sense),
            (SenseLabel::SynB, cfg.synonym_sentences_per_sense),
        ];
        for (sense, count) in blocks {
            for _ in 0..count {
                sentences.push(SentenceRecord {
                    sentence_id: next,
                    sense,
                    target_token_index: 0,
                    text: None,
                });
                next += 1;
            }
        }
        words.push(WordEntry {
            lemma: lemma.clone(),
            pos: PartOfSpeech::Noun,
            sense_a_id: format!("{lemma}.n.01"),
            sense_b_id: format!("{lemma}.n.02"),
            sentences,
            synonym_a: has_syn.then(|| format!("{lemma}_syn_a")),
            synonym_b: has_syn.then(|| format!("{lemma}_syn_b")),
            wup_similarity: 0.2,
            link_source: LinkSource::Wordnet,
        });
    }
    Manifest {
        model_name: model_name.into(),
        n_layers: cfg.n_layers,
        sites,
        words,
        format_version: manifest::FORMAT_VERSION,
        seed_note: format!("synthetic, seed {}", cfg.seed),
    }
}

/// Build a synthetic store and its ground truth. Deterministic in the config.
pub fn generate(cfg: &SynthConfig) -> Result<(ActivationStore, GroundTruth)> {
    cfg.check()?;
    let lay = layout(cfg);
    let mut sites = vec![SiteDescriptor {
        site_id: manifest::SITE_MLP.into(),
        dim_per_layer: vec![cfg.d; cfg.n_layers],
    }];
    if cfg.token_embedding {
        sites.push(SiteDescriptor {
            site_id: manifest::SITE_TOKEN_EMBEDDING.into(),
            dim_per_layer: vec![cfg.d],
        });
    }
    let manifest = synth_manifest(cfg, sites, "synthetic");
    let n = manifest.n_sentences();

    let build = |stream: &[&str], l: f64, s: f64| -> Matrix {
        let mut rng = rng::stream_rng(cfg.seed, rng::named_stream(stream));
        let mut data = Vec::with_capacity(n * cfg.d);
        for (wi, w) in manifest.words.iter().enumerate() {
            for sent in &w.sentences {
                let (fv, gv) = match sent.sense {
                    SenseLabel::A => (&lay.f[wi], &lay.g[wi][0]),
                    SenseLabel::B => (&lay.f[wi], &lay.g[wi][1]),
                    SenseLabel::SynA => (&lay.f_syn[wi][0], &lay.g[wi][0]),
                    SenseLabel::SynB => (&lay.f_syn[wi][1], &lay.g[wi][1]),
                };
                for j in 0..cfg.d {
                    let noise = if cfg.noise_sigma > 0.0 {
                        cfg.noise_sigma * rng::normal(&mut rng)
                    } else {
                        0.0
                    };
                    data.push((l * fv[j] + s * gv[j] + noise) as f32);
                }
            }
        }
        Matrix::new(n, cfg.d, data).expect("shape matches")
    };

    let mut matrices = BTreeMap::new();
    for layer in 0..cfg.n_layers {
        let (l, s) = cfg.strengths(layer);
        let tag = layer.to_string();
        matrices.insert(
            MatrixKey::new(manifest::SITE_MLP, layer),
            build(&["synth", "noise", manifest::SITE_MLP, &tag], l, s),
        );
    }
    if cfg.token_embedding {
        let (l, _) = cfg.strengths(0);
        matrices.insert(
            MatrixKey::new(manifest::SITE_TOKEN_EMBEDDING, 0),
            build(&["synth", "noise", manifest::SITE_TOKEN_EMBEDDING], l.max(1e-3), 0.0),
        );
    }
    let store = ActivationStore::from_parts(manifest, matrices)?;
    let store_hash = store.content_hash()?;
    let (rho, rho_no_syn) = (0..cfg.n_layers)
        .map(|k| {
            let (l, s) = cfg.strengths(k);
            let den = l * l + s * s;
            (expected_rho(l, s), (den > 0.0).then(|| l * l / den))
        })
        .unzip();
    let truth = GroundTruth {
        config: cfg.clone(),
        store_hash,
        site: manifest::SITE_MLP.into(),
        rho,
        rho_no_syn,
        words: lay.planted,
        background: lay.background,
        lis_basis: lay.basis,
    };
    Ok((store, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeSynthConfig {
    pub n_words: usize,
    pub sentences_per_sense: usize,
    pub dictionary_size: usize,
    pub n_layers: usize,
    pub active_per_word: usize,
    pub blind_fraction: f64,
    /// Firing probability of an active feature in the sense(s) it serves.
    pub fire_rate: f64,
    /// Firing probability everywhere else.
    pub background_rate: f64,
    pub seed: u64,
}

impl Default for SaeSynthConfig {
    fn default() -> Self {
        SaeSynthConfig {
            n_words: 50,
            sentences_per_sense: 20,
            dictionary_size: 2048,
            n_layers: 2,
            active_per_word: 20,
            blind_fraction: 0.3,
            fire_rate: 0.9,
            background_rate: 0.02,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeTruth {
    pub config: SaeSynthConfig,
    /// Per layer, per word key: (one-sense features, both-sense blind features).
    pub features: Vec<BTreeMap<String, (Vec<usize>, Vec<usize>)>>,
    pub expected_ratio: f64,
}

/// Nonnegative SAE-like feature activations under the `sae_features` site.
/// Blind features get sense-B activations that are a permutation of their
/// sense-A activations, so their between-sense effect size is exactly 0.
pub fn generate_sae(cfg: &SaeSynthConfig) -> Result<(ActivationStore, SaeTruth)> {
    if cfg.n_words < 1 || cfg.sentences_per_sense < 2 || cfg.n_layers < 1 {
        return Err(LexError::InvalidInput("SAE synth needs words, layers and 2+ sentences per sense".into()));
    }
    if cfg.active_per_word > cfg.dictionary_size {
        return Err(LexError::OutOfRange(format!(
            "{} active features per word exceed dictionary size {}",
            cfg.active_per_word, cfg.dictionary_size
        )));
    }
    for (name, v) in [
        ("blind_fraction", cfg.blind_fraction),
        ("fire_rate", cfg.fire_rate),
        ("background_rate", cfg.background_rate),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(LexError::InvalidInput(format!("{name} = {v} outside [0, 1]")));
        }
    }
    let base = SynthConfig {
        n_words: cfg.n_words,
        sentences_per_sense: cfg.sentences_per_sense,
        synonym_sentences_per_sense: 0,
        n_layers: cfg.n_layers,
        seed: cfg.seed,
        ..SynthConfig::default()
    };
    let manifest = synth_manifest(
        &base,
        vec![SiteDescriptor {
            site_id: manifest::SITE_SAE.into(),
            dim_per_layer: vec![cfg.dictionary_size; cfg.n_layers],
        }],
        "synthetic-sae",
    );
    let n = manifest.n_sentences();
    let dict = cfg.dictionary_size;
    let n_blind = (cfg.active_per_word as f64 * cfg.blind_fraction).round() as usize;
    let spp = cfg.sentences_per_sense;

    let mut matrices = BTreeMap::new();
    let mut features = Vec::new();
    for layer in 0..cfg.n_layers {
        let tag = layer.to_string();
        let mut rng = rng::stream_rng(cfg.seed, rng::named_stream(&["synth", "sae", &tag]));
        let mut m = Matrix::zeros(n, dict);
        let mut layer_truth = BTreeMap::new();
        for w in &manifest.words {
            let ids_a = w.sentence_ids(SenseLabel::A);
            let ids_b = w.sentence_ids(SenseLabel::B);
            let chosen = rng::sample_sorted(&mut rng, dict, cfg.active_per_word);
            let mut order = chosen.clone();
            order.shuffle(&mut rng);
            let blind: Vec<usize> = {
                let mut b = order[..n_blind].to_vec();
                b.sort_unstable();
                b
            };
            let mut one_sense: Vec<usize> = order[n_blind..].to_vec();
            one_sense.sort_unstable();
            let is_chosen = |j: usize| chosen.binary_search(&j).is_ok();
            // Background firing on every feature not serving this word.
            for &id in ids_a.iter().chain(&ids_b) {
                for j in 0..dict {
                    if !is_chosen(j) && rng.gen::<f64>() < cfg.background_rate {
                        m.row_mut(id)[j] = magnitude(&mut rng);
                    }
                }
            }
            for (k, &j) in one_sense.iter().enumerate() {
                let (on, off) = if k % 2 == 0 { (&ids_a, &ids_b) } else { (&ids_b, &ids_a) };
                for &id in on.iter() {
                    if rng.gen::<f64>() < cfg.fire_rate {
                        m.row_mut(id)[j] = magnitude(&mut rng);
                    }
                }
                for &id in off.iter() {
                    if rng.gen::<f64>() < cfg.background_rate {
                        m.row_mut(id)[j] = magnitude(&mut rng);
                    }
                }
            }
            for &j in &blind {
                let mut vals: Vec<f32> = (0..spp)
                    .map(|_| if rng.gen::<f64>() < cfg.fire_rate { magnitude(&mut rng) } else { 0.0 })
                    .collect();
                for (&id, &v) in ids_a.iter().zip(&vals) {
                    m.row_mut(id)[j] = v;
                }
                vals.shuffle(&mut rng);
                for (&id, &v) in ids_b.iter().zip(&vals) {
                    m.row_mut(id)[j] = v;
                }
            }
            layer_truth.insert(w.key(), (one_sense, blind));
        }
        matrices.insert(MatrixKey::new(manifest::SITE_SAE, layer), m);
        features.push(layer_truth);
    }
    let store = ActivationStore::from_parts(manifest, matrices)?;
    let expected_ratio = if cfg.active_per_word == 0 {
        0.0
    } else {
        n_blind as f64 / cfg.active_per_word as f64
    };
    Ok((
        store,
        SaeTruth {
            config: cfg.clone(),
            features,
            expected_ratio,
        },
    ))
}

fn magnitude(rng: &mut StreamRng) -> f32 {
    (0.5 + rng.gen::<f64>() * 2.0) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::validate::validate;

    fn small() -> SynthConfig {
        SynthConfig::preset("small").unwrap()
    }

    #[test]
    fn planted_sets_are_disjoint_and_cover_d() {
        let (_, truth) = generate(&small()).unwrap();
        let mut all: Vec<usize> = truth.background.clone();
        for w in &truth.words {
            all.extend(&w.form_neurons);
            all.extend(&w.selective_a);
            all.extend(&w.selective_b);
        }
        all.sort_unstable();
        assert_eq!(all, (0..small().d).collect::<Vec<_>>());
    }

    #[test]
    fn basis_is_orthonormal_on_background() {
        let (_, truth) = generate(&small()).unwrap();
        for (i, a) in truth.lis_basis.iter().enumerate() {
            for (j, b) in truth.lis_basis.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
            for (k, x) in a.iter().enumerate() {
                if truth.background.binary_search(&k).is_err() {
                    assert_eq!(*x, 0.0);
                }
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let (a, ta) = generate(&small()).unwrap();
        let (b, tb) = generate(&small()).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
        let other = SynthConfig { seed: 7, ..small() };
        let (c, _) = generate(&other).unwrap();
        assert_ne!(a.content_hash().unwrap(), c.content_hash().unwrap());
    }

    #[test]
    fn generated_store_validates_clean() {
        let (store, _) = generate(&small()).unwrap();
        let report = validate(&store);
        assert!(report.is_empty(), "{:?}", report.entries);
    }

    #[test]
    fn noiseless_rows_follow_the_construction() {
        let cfg = SynthConfig { noise_sigma: 0.0, ..small() };
        let (store, truth) = generate(&cfg).unwrap();
        let m = store.matrix(manifest::SITE_MLP, 0).unwrap();
        let w = &store.manifest().words[0];
        let p = &truth.words[0];
        let a = w.sentence_ids(SenseLabel::A);
        let b = w.sentence_ids(SenseLabel::B);
        let amp = cfg.selective_amplitude(0) as f32;
        for &j in &p.selective_a {
            assert!((m.row(a[0])[j] - amp).abs() < 1e-5);
            assert_eq!(m.row(b[0])[j], 0.0);
        }
        let form = cfg.form_amplitude(0) as f32;
        for &j in &p.form_neurons {
            assert!((m.row(a[0])[j] - form).abs() < 1e-5);
            assert!((m.row(b[1])[j] - form).abs() < 1e-5);
        }
        assert_eq!(m.row(a[0]), m.row(a[1]));
    }

    #[test]
    fn rho_helpers_agree() {
        for rho in [-0.5, 0.0, 0.2, 0.5, 0.8, 1.0] {
            let (l, s) = strengths_for_rho(rho);
            assert!((expected_rho(l, s).unwrap() - rho).abs() < 1e-12);
        }
        assert_eq!(expected_rho(0.0, 0.0), None);
    }

    #[test]
    fn rejects_overfull_layouts() {
        let cfg = SynthConfig { d: 100, ..SynthConfig::default() };
        assert!(matches!(generate(&cfg), Err(LexError::OutOfRange(_))));
    }

    #[test]
    fn sae_store_is_nonnegative_and_validates() {
        let cfg = SaeSynthConfig {
            n_words: 4,
            dictionary_size: 64,
            ..SaeSynthConfig::default()
        };
        let (store, truth) = generate_sae(&cfg).unwrap();
        assert!(validate(&store).is_empty());
        let m = store.matrix(manifest::SITE_SAE, 1).unwrap();
        assert!(m.as_slice().iter().all(|&x| x >= 0.0));
        let (one, blind) = &truth.features[0]["w000.n"];
        assert_eq!(blind.len(), 6);
        assert_eq!(one.len(), 14);
    }
}
