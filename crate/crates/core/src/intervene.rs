// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mean-ablation plans and the analysis of their exported outcomes.
//!
//! Nothing here runs a model. A plan lists, per layer, matched-size neuron
//! groups to replace with dataset means at the target position; an external
//! executor runs it and writes an outcome directory:
//!
//! ```text
//! outcomes/
//!   outcomes.json      word, kind, groups, sentences, optional diagnostic columns
//!   baseline.lexa      one row per sentence (order of outcomes.json)
//!   <group>.lexa       same shape, one file per ablated group
//!   perplexity.csv     group,sentence_id,ppl
//! ```
//!
//! With `kind = "probabilities"` each row is a full output distribution;
//! with `kind = "diagnostic_log_probs"` each column is the log-probability
//! of one diagnostic token.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LexError, Result};
use crate::neurons::{NeuronClassification, SsiVector};
use crate::rng;
use crate::store::manifest::SenseLabel;
use crate::store::{lexa, ActivationStore, Matrix};

pub const PLAN_FILE: &str = "plan.json";
pub const MEANS_FILE: &str = "means.lexa";
pub const OUTCOMES_FILE: &str = "outcomes.json";
pub const PERPLEXITY_FILE: &str = "perplexity.csv";
pub const BASELINE: &str = "baseline";
pub const POSITION_RULE: &str = "last_subword";
pub const MEANS_SCOPE: &str = "global";
/// Allowed deviation of a probability row's sum from 1.
pub const NORMALIZATION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    SenseASelective,
    SenseBSelective,
    SenseBlind,
    Random,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::SenseASelective, Group::SenseBSelective, Group::SenseBlind, Group::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::SenseASelective => "sense_a_selective",
            Group::SenseBSelective => "sense_b_selective",
            Group::SenseBlind => "sense_blind",
            Group::Random => "random",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = LexError;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| LexError::InvalidInput(format!("unknown group `{s}`")))
    }
}

/// Dataset mean of every neuron at each listed layer, over all sentences in
/// the store. Row `i` of the result belongs to `layers[i]`.
pub fn compute_group_means(store: &ActivationStore, layers: &[usize], site: &str) -> Result<Matrix> {
    if store.n_sentences() == 0 {
        return Err(LexError::InvalidInput("store has no sentences".into()));
    }
    let mut rows = Vec::with_capacity(layers.len());
    let mut dim = None;
    for &layer in layers {
        let m = store.matrix(site, layer)?;
        if *dim.get_or_insert(m.cols()) != m.cols() {
            return Err(LexError::DimensionMismatch(format!(
                "layer {layer} has {} neurons, earlier layers {}",
                m.cols(),
                dim.unwrap()
            )));
        }
        let mut acc = vec![0.0f64; m.cols()];
        for r in m.iter_rows() {
            for (a, &v) in acc.iter_mut().zip(r) {
                *a += v as f64;
            }
        }
        let n = m.rows() as f64;
        rows.push(acc.into_iter().map(|a| (a / n) as f32).collect::<Vec<f32>>());
    }
    Matrix::from_rows(dim.unwrap_or(0), &rows)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanLayer {
    pub layer: usize,
    pub matched_count: usize,
    pub groups: BTreeMap<Group, Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcludedLayer {
    pub layer: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionPlan {
    pub word: String,
    pub seed: u64,
    pub site: String,
    pub position_rule: String,
    /// LEXA file with one row of per-neuron means per entry of `means_layers`.
    pub means_file: String,
    pub means_scope: String,
    pub means_layers: Vec<usize>,
    pub layers: Vec<PlanLayer>,
    pub excluded_layers: Vec<ExcludedLayer>,
}

impl InterventionPlan {
    pub fn parse(name: &str, bytes: &[u8]) -> Result<InterventionPlan> {
        let plan: InterventionPlan = serde_json::from_slice(bytes).map_err(|e| LexError::format(name, e.to_string()))?;
        plan.check().map_err(|c| LexError::format(name, c))?;
        Ok(plan)
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("plan serializes");
        v.push(b'\n');
        v
    }

    /// Structural invariants: equal group sizes, disjoint groups, every
    /// planned layer covered by the means file.
    pub fn check(&self) -> std::result::Result<(), String> {
        let mut seen_layers = BTreeSet::new();
        for pl in &self.layers {
            if !seen_layers.insert(pl.layer) {
                return Err(format!("layer {} planned twice", pl.layer));
            }
            if !self.means_layers.contains(&pl.layer) {
                return Err(format!("layer {} has no row in the means file", pl.layer));
            }
            if pl.matched_count == 0 {
                return Err(format!("layer {}: matched_count is 0", pl.layer));
            }
            let mut used = BTreeSet::new();
            for g in Group::ALL {
                let list = pl.groups.get(&g).ok_or_else(|| format!("layer {}: group {g} missing", pl.layer))?;
                if list.len() != pl.matched_count {
                    return Err(format!(
                        "layer {}: group {g} has {} neurons, matched_count is {}",
                        pl.layer,
                        list.len(),
                        pl.matched_count
                    ));
                }
                for &j in list {
                    if !used.insert(j) {
                        return Err(format!("layer {}: neuron {j} appears in two groups", pl.layer));
                    }
                }
            }
        }
        Ok(())
    }
}

/// SSI and classification of the plan's word at one layer.
#[derive(Debug, Clone)]
pub struct LayerSelection<'a> {
    pub ssi: &'a SsiVector,
    pub class: &'a NeuronClassification,
}

/// Matched-size groups per layer. Selective groups keep their highest-SSI
/// neurons, the blind group its lowest-SSI neurons; the random group is a
/// seeded uniform draw from neurons in none of the classified sets.
pub fn make_plan(word: &str, site: &str, selections: &[LayerSelection<'_>], seed: u64) -> Result<InterventionPlan> {
    if selections.iter().all(|s| s.class.selective.is_empty()) {
        return Err(LexError::InvalidInput(format!("word {word}: every selective set is empty")));
    }
    let mut layers = Vec::new();
    let mut excluded = Vec::new();
    for sel in selections {
        let (v, c) = (sel.ssi, sel.class);
        let layer = c.layer;
        let d = v.values.len();
        let sizes = [c.selective_a.len(), c.selective_b.len(), c.blind.len()];
        let empty: Vec<&str> = ["sense_a_selective", "sense_b_selective", "sense_blind"]
            .iter()
            .zip(sizes)
            .filter(|(_, n)| *n == 0)
            .map(|(g, _)| *g)
            .collect();
        if !empty.is_empty() {
            excluded.push(ExcludedLayer { layer, reason: format!("empty group: {}", empty.join(", ")) });
            continue;
        }
        let mut classified = vec![false; d];
        for &j in c.selective_a.iter().chain(&c.selective_b).chain(&c.blind) {
            classified[j] = true;
        }
        let rest: Vec<usize> = (0..d).filter(|&j| !classified[j]).collect();
        let matched = sizes.into_iter().min().unwrap().max(1);
        if rest.len() < matched {
            excluded.push(ExcludedLayer {
                layer,
                reason: format!("only {} unclassified neurons for a random group of {matched}", rest.len()),
            });
            continue;
        }
        let by_ssi = |set: &[usize], highest: bool| -> Vec<usize> {
            let mut s = set.to_vec();
            s.sort_by(|&a, &b| {
                let o = v.values[a].total_cmp(&v.values[b]);
                (if highest { o.reverse() } else { o }).then(a.cmp(&b))
            });
            s.truncate(matched);
            s.sort_unstable();
            s
        };
        let mut r = rng::stream_rng(seed, rng::named_stream(&["plan", word, &layer.to_string()]));
        let random: Vec<usize> = rng::sample_sorted(&mut r, rest.len(), matched).into_iter().map(|i| rest[i]).collect();
        layers.push(PlanLayer {
            layer,
            matched_count: matched,
            groups: BTreeMap::from([
                (Group::SenseASelective, by_ssi(&c.selective_a, true)),
                (Group::SenseBSelective, by_ssi(&c.selective_b, true)),
                (Group::SenseBlind, by_ssi(&c.blind, false)),
                (Group::Random, random),
            ]),
        });
    }
    Ok(InterventionPlan {
        word: word.to_string(),
        seed,
        site: site.to_string(),
        position_rule: POSITION_RULE.into(),
        means_file: MEANS_FILE.into(),
        means_scope: MEANS_SCOPE.into(),
        means_layers: selections.iter().map(|s| s.class.layer).collect(),
        layers,
        excluded_layers: excluded,
    })
}

pub fn write_plan(dir: &Path, plan: &InterventionPlan, means: &Matrix) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LexError::io(dir, e))?;
    let p = dir.join(PLAN_FILE);
    std::fs::write(&p, plan.to_json_bytes()).map_err(|e| LexError::io(&p, e))?;
    lexa::write_file(&dir.join(&plan.means_file), means)
}

pub fn read_plan(dir: &Path) -> Result<(InterventionPlan, Matrix)> {
    let p = dir.join(PLAN_FILE);
    let bytes = std::fs::read(&p).map_err(|e| LexError::io(&p, e))?;
    let plan = InterventionPlan::parse(PLAN_FILE, &bytes)?;
    let means = lexa::read_file(&dir.join(&plan.means_file))?;
    if means.rows() != plan.means_layers.len() {
        return Err(LexError::format(
            &plan.means_file,
            format!("{} rows for {} means layers", means.rows(), plan.means_layers.len()),
        ));
    }
    for pl in &plan.layers {
        if let Some(bad) = pl.groups.values().flatten().find(|&&j| j >= means.cols()) {
            return Err(LexError::format(PLAN_FILE, format!("layer {}: neuron {bad} >= {}", pl.layer, means.cols())));
        }
    }
    Ok((plan, means))
}

/// `sum p ln(p/q)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(LexError::DimensionMismatch(format!("support sizes {} and {}", p.len(), q.len())));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(LexError::Undefined(format!("q[{i}] = {qi} where p[{i}] = {pi}")));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Probabilities,
    DiagnosticLogProbs,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeSentence {
    pub sentence_id: usize,
    pub sense: SenseLabel,
}

/// Column indices of each sense's diagnostic tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticTokens {
    #[serde(rename = "A")]
    pub a: Vec<usize>,
    #[serde(rename = "B")]
    pub b: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeMeta {
    pub word: String,
    pub kind: OutcomeKind,
    /// Ablated groups; the baseline is implicit.
    pub groups: Vec<String>,
    pub sentences: Vec<OutcomeSentence>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<DiagnosticTokens>,
}

impl OutcomeMeta {
    pub fn parse(name: &str, bytes: &[u8]) -> Result<OutcomeMeta> {
        let m: OutcomeMeta = serde_json::from_slice(bytes).map_err(|e| LexError::format(name, e.to_string()))?;
        let mut ids = BTreeSet::new();
        for s in &m.sentences {
            if !ids.insert(s.sentence_id) {
                return Err(LexError::format(name, format!("sentence {} listed twice", s.sentence_id)));
            }
            if !matches!(s.sense, SenseLabel::A | SenseLabel::B) {
                return Err(LexError::format(name, format!("sentence {}: outcome senses are A or B", s.sentence_id)));
            }
        }
        let mut names = BTreeSet::new();
        for g in &m.groups {
            if g == BASELINE || g.is_empty() || g.contains(['/', '\\', '.']) {
                return Err(LexError::format(name, format!("invalid group name `{g}`")));
            }
            if !names.insert(g) {
                return Err(LexError::format(name, format!("group `{g}` listed twice")));
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeBundle {
    pub meta: OutcomeMeta,
    /// Keyed by group name, including [`BASELINE`]; rows follow `meta.sentences`.
    pub outputs: BTreeMap<String, Matrix>,
    /// Per group, per sentence id.
    pub perplexity: BTreeMap<String, BTreeMap<usize, f64>>,
}

#[derive(Debug, Deserialize)]
struct PplRow {
    group: String,
    sentence_id: usize,
    ppl: f64,
}

/// `group,sentence_id,ppl`.
pub fn parse_perplexity_csv(name: &str, bytes: &[u8]) -> Result<BTreeMap<String, BTreeMap<usize, f64>>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let mut out: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    for (i, rec) in rdr.deserialize::<PplRow>().enumerate() {
        let r = rec.map_err(|e| LexError::format(name, format!("row {}: {e}", i + 1)))?;
        if !(r.ppl.is_finite() && r.ppl > 0.0) {
            return Err(LexError::format(name, format!("row {}: perplexity {} is not positive", i + 1, r.ppl)));
        }
        if out.entry(r.group.clone()).or_default().insert(r.sentence_id, r.ppl).is_some() {
            return Err(LexError::format(name, format!("row {}: duplicate ({}, {})", i + 1, r.group, r.sentence_id)));
        }
    }
    Ok(out)
}

pub fn perplexity_csv(ppl: &BTreeMap<String, BTreeMap<usize, f64>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["group", "sentence_id", "ppl"])?;
    for (g, rows) in ppl {
        for (id, v) in rows {
            w.write_record([g.clone(), id.to_string(), format!("{v}")])?;
        }
    }
    w.into_inner().map_err(|e| LexError::InvalidInput(e.to_string()))
}

impl OutcomeBundle {
    /// Shape, normalization and coverage checks.
    pub fn check(&self) -> Result<()> {
        let n = self.meta.sentences.len();
        let mut cols = None;
        let ids: BTreeSet<usize> = self.meta.sentences.iter().map(|s| s.sentence_id).collect();
        for g in std::iter::once(BASELINE).chain(self.meta.groups.iter().map(String::as_str)) {
            let file = format!("{g}.lexa");
            let m = self
                .outputs
                .get(g)
                .ok_or_else(|| LexError::format(&file, if g == BASELINE { "missing baseline" } else { "missing group output" }))?;
            if m.rows() != n {
                return Err(LexError::format(&file, format!("{} rows for {n} sentences", m.rows())));
            }
            if *cols.get_or_insert(m.cols()) != m.cols() {
                return Err(LexError::format(&file, format!("{} columns, baseline has {}", m.cols(), cols.unwrap())));
            }
            for (i, row) in m.iter_rows().enumerate() {
                match self.meta.kind {
                    OutcomeKind::Probabilities => {
                        if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                            return Err(LexError::format(&file, format!("row {i}: probabilities must be finite and nonnegative")));
                        }
                        let s: f64 = row.iter().map(|&v| v as f64).sum();
                        if (s - 1.0).abs() > NORMALIZATION_TOL {
                            return Err(LexError::format(&file, format!("row {i}: probabilities sum to {s}")));
                        }
                    }
                    OutcomeKind::DiagnosticLogProbs => {
                        if row.iter().any(|v| v.is_nan() || *v > 0.0) {
                            return Err(LexError::format(&file, format!("row {i}: log-probabilities must be <= 0")));
                        }
                    }
                }
            }
            let have: BTreeSet<usize> = self.perplexity.get(g).map(|m| m.keys().copied().collect()).unwrap_or_default();
            if have != ids {
                return Err(LexError::format(PERPLEXITY_FILE, format!("group {g}: perplexities do not cover the listed sentences")));
            }
        }
        if let Some(d) = &self.meta.diagnostic {
            let c = cols.unwrap_or(0);
            if let Some(bad) = d.a.iter().chain(&d.b).find(|&&j| j >= c) {
                return Err(LexError::format(OUTCOMES_FILE, format!("diagnostic column {bad} >= {c}")));
            }
        }
        Ok(())
    }
}

pub fn read_outcomes(dir: &Path) -> Result<OutcomeBundle> {
    let read = |name: &str| -> Result<Vec<u8>> {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| LexError::io(&p, e))
    };
    let meta = OutcomeMeta::parse(OUTCOMES_FILE, &read(OUTCOMES_FILE)?)?;
    let mut outputs = BTreeMap::new();
    for g in std::iter::once(BASELINE.to_string()).chain(meta.groups.iter().cloned()) {
        let file = format!("{g}.lexa");
        let p = dir.join(&file);
        if !p.exists() {
            return Err(LexError::format(file, if g == BASELINE { "missing baseline" } else { "missing group output" }));
        }
        outputs.insert(g, lexa::read_file(&p)?);
    }
    let perplexity = parse_perplexity_csv(PERPLEXITY_FILE, &read(PERPLEXITY_FILE)?)?;
    let b = OutcomeBundle { meta, outputs, perplexity };
    b.check()?;
    Ok(b)
}

pub fn write_outcomes(dir: &Path, b: &OutcomeBundle) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LexError::io(dir, e))?;
    let p = dir.join(OUTCOMES_FILE);
    let mut meta = serde_json::to_vec_pretty(&b.meta)?;
    meta.push(b'\n');
    std::fs::write(&p, meta).map_err(|e| LexError::io(&p, e))?;
    for (g, m) in &b.outputs {
        lexa::write_file(&dir.join(format!("{g}.lexa")), m)?;
    }
    let p = dir.join(PERPLEXITY_FILE);
    std::fs::write(&p, perplexity_csv(&b.perplexity)?).map_err(|e| LexError::io(&p, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupOutcome {
    /// Mean over sentences of KL(baseline || ablated); probability outputs only.
    pub kl_mean: Option<f64>,
    pub delta_ppl_a: Option<f64>,
    pub delta_ppl_b: Option<f64>,
    /// `|delta_ppl_a - delta_ppl_b|`.
    pub specificity: Option<f64>,
    pub sense_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub word: String,
    pub kind: OutcomeKind,
    pub kl_direction: String,
    pub baseline_sense_accuracy: Option<f64>,
    pub groups: BTreeMap<String, GroupOutcome>,
    /// `"g/h"` → specificity(g) / specificity(h), for nonzero denominators.
    pub specificity_ratios: BTreeMap<String, f64>,
    pub kl_ratios: BTreeMap<String, f64>,
}

fn as_probs(row: &[f32], kind: OutcomeKind) -> Vec<f64> {
    match kind {
        OutcomeKind::Probabilities => row.iter().map(|&v| v as f64).collect(),
        OutcomeKind::DiagnosticLogProbs => row.iter().map(|&v| (v as f64).exp()).collect(),
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn ratios(values: &BTreeMap<String, Option<f64>>) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for (g, a) in values {
        for (h, b) in values {
            if let (Some(a), Some(b)) = (a, b) {
                if g != h && *b > 0.0 {
                    out.insert(format!("{g}/{h}"), a / b);
                }
            }
        }
    }
    out
}

/// Per-group KL, perplexity deltas, specificity and sense accuracy. Sums run
/// in sentence-id order, so the result does not depend on row order.
pub fn analyze_outcomes(bundle: &OutcomeBundle, diagnostic: Option<&DiagnosticTokens>) -> Result<InterventionReport> {
    bundle.check()?;
    let meta = &bundle.meta;
    let diagnostic = diagnostic.or(meta.diagnostic.as_ref());
    if let Some(d) = diagnostic {
        if d.a.is_empty() || d.b.is_empty() {
            return Err(LexError::InvalidInput("diagnostic token lists must be nonempty".into()));
        }
        let c = bundle.outputs[BASELINE].cols();
        if let Some(bad) = d.a.iter().chain(&d.b).find(|&&j| j >= c) {
            return Err(LexError::OutOfRange(format!("diagnostic column {bad} >= {c}")));
        }
    }
    let mut order: Vec<usize> = (0..meta.sentences.len()).collect();
    order.sort_by_key(|&i| meta.sentences[i].sentence_id);
    let base = &bundle.outputs[BASELINE];
    let base_ppl = &bundle.perplexity[BASELINE];

    let accuracy = |m: &Matrix| -> Option<f64> {
        let d = diagnostic?;
        let hits: Vec<f64> = order
            .iter()
            .map(|&i| {
                let p = as_probs(m.row(i), meta.kind);
                let sa: f64 = d.a.iter().map(|&j| p[j]).sum();
                let sb: f64 = d.b.iter().map(|&j| p[j]).sum();
                let ok = match meta.sentences[i].sense {
                    SenseLabel::A => sa > sb,
                    _ => sb > sa,
                };
                if ok { 1.0 } else { 0.0 }
            })
            .collect();
        mean(&hits)
    };

    let groups: BTreeMap<String, GroupOutcome> = meta
        .groups
        .par_iter()
        .map(|g| {
            let m = &bundle.outputs[g];
            let kl_mean = match meta.kind {
                OutcomeKind::Probabilities => {
                    let kls = order
                        .iter()
                        .map(|&i| kl_divergence(&as_probs(base.row(i), meta.kind), &as_probs(m.row(i), meta.kind)))
                        .collect::<Result<Vec<f64>>>()
                        .map_err(|e| LexError::InvalidInput(format!("group {g}: {e}")))?;
                    mean(&kls)
                }
                OutcomeKind::DiagnosticLogProbs => None,
            };
            let ppl = &bundle.perplexity[g];
            let delta = |sense: SenseLabel| {
                let d: Vec<f64> = order
                    .iter()
                    .map(|&i| &meta.sentences[i])
                    .filter(|s| s.sense == sense)
                    .map(|s| ppl[&s.sentence_id] - base_ppl[&s.sentence_id])
                    .collect();
                mean(&d)
            };
            let (da, db) = (delta(SenseLabel::A), delta(SenseLabel::B));
            let specificity = match (da, db) {
                (Some(a), Some(b)) => Some((a - b).abs()),
                _ => None,
            };
            Ok((
                g.clone(),
                GroupOutcome { kl_mean, delta_ppl_a: da, delta_ppl_b: db, specificity, sense_accuracy: accuracy(m) },
            ))
        })
        .collect::<Result<_>>()?;
    let spec: BTreeMap<String, Option<f64>> = groups.iter().map(|(g, o)| (g.clone(), o.specificity)).collect();
    let kl: BTreeMap<String, Option<f64>> = groups.iter().map(|(g, o)| (g.clone(), o.kl_mean)).collect();
    Ok(InterventionReport {
        word: meta.word.clone(),
        kind: meta.kind,
        kl_direction: "baseline || ablated".into(),
        baseline_sense_accuracy: accuracy(base),
        specificity_ratios: ratios(&spec),
        kl_ratios: ratios(&kl),
        groups,
    })
}
