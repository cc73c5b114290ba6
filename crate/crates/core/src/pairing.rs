// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sentence pairs for the four factorial conditions.
//!
//! | condition | word      | sense     |
//! |-----------|-----------|-----------|
//! | SL        | same      | same      |
//! | PS        | same      | different |
//! | SYN       | different | same      |
//! | CL        | different | different |
//!
//! Pairs are unordered and stored with the smaller sentence id first.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LexError, Result};
use crate::rng::{self, named_stream, stream_rng};
use crate::store::{ActivationStore, Manifest, SenseLabel, WordEntry};

pub const DEFAULT_CAP: usize = 200;
pub const DEFAULT_SEED: u64 = 42;
/// Synonym rows needed before a sense counts as SYN-covered.
pub const MIN_SYNONYM_SENTENCES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    SL,
    PS,
    SYN,
    CL,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::SL, Condition::PS, Condition::SYN, Condition::CL];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::SL => "SL",
            Condition::PS => "PS",
            Condition::SYN => "SYN",
            Condition::CL => "CL",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = LexError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SL" => Ok(Condition::SL),
            "PS" => Ok(Condition::PS),
            "SYN" => Ok(Condition::SYN),
            "CL" => Ok(Condition::CL),
            other => Err(LexError::InvalidInput(format!("unknown condition {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionPair {
    pub word: String,
    pub condition: Condition,
    pub sent_a: usize,
    pub sent_b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub cap: usize,
    pub seed: u64,
    /// Word keys to pair; `None` pairs every word in the manifest.
    pub eligible_words: Option<Vec<String>>,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            cap: DEFAULT_CAP,
            seed: DEFAULT_SEED,
            eligible_words: None,
        }
    }
}

/// Pairs grouped by word key, then condition.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    /// Cap and seed are known when the set was built here, not when it was
    /// read back from CSV.
    pub cap: Option<usize>,
    pub seed: Option<u64>,
    pub groups: BTreeMap<String, BTreeMap<Condition, Vec<(usize, usize)>>>,
}

impl PairSet {
    pub fn pairs(&self, word: &str, condition: Condition) -> &[(usize, usize)] {
        self.groups
            .get(word)
            .and_then(|g| g.get(&condition))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    pub fn counts(&self) -> BTreeMap<String, BTreeMap<Condition, usize>> {
        self.groups
            .iter()
            .map(|(w, g)| (w.clone(), g.iter().map(|(c, p)| (*c, p.len())).collect()))
            .collect()
    }

    /// Words that have at least one SYN pair.
    pub fn syn_covered(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|(_, g)| g.get(&Condition::SYN).is_some_and(|p| !p.is_empty()))
            .map(|(w, _)| w.as_str())
            .collect()
    }

    pub fn total(&self) -> usize {
        self.groups.values().flat_map(|g| g.values()).map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = ConditionPair> + '_ {
        self.groups.iter().flat_map(|(w, g)| {
            g.iter().flat_map(move |(c, pairs)| {
                pairs.iter().map(move |&(a, b)| ConditionPair {
                    word: w.clone(),
                    condition: *c,
                    sent_a: a,
                    sent_b: b,
                })
            })
        })
    }

    /// `word,condition,sent_a,sent_b` with a header row.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["word", "condition", "sent_a", "sent_b"])?;
        for p in self.iter() {
            w.write_record([
                p.word.as_str(),
                p.condition.as_str(),
                &p.sent_a.to_string(),
                &p.sent_b.to_string(),
            ])?;
        }
        w.into_inner()
            .map_err(|e| LexError::InvalidInput(format!("csv flush: {e}")))
    }

    /// Parse the CSV form. Pairs are normalized to (min, max); duplicate
    /// pairs within a (word, condition) and self-pairs are rejected.
    pub fn from_csv(name: &str, bytes: &[u8]) -> Result<PairSet> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
        let headers = reader
            .headers()
            .map_err(|e| LexError::format(name, e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["word", "condition", "sent_a", "sent_b"] {
            return Err(LexError::format(name, format!("unexpected header {headers:?}")));
        }
        let mut set = PairSet::default();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| LexError::format(name, e.to_string()))?;
            let bad = |what: &str| LexError::format(name, format!("record {}: {what}", line + 1));
            if rec.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let condition: Condition = rec[1].parse().map_err(|_| bad("unknown condition"))?;
            let a: usize = rec[2].parse().map_err(|_| bad("sent_a is not an index"))?;
            let b: usize = rec[3].parse().map_err(|_| bad("sent_b is not an index"))?;
            if a == b {
                return Err(bad("sent_a equals sent_b"));
            }
            set.groups
                .entry(rec[0].to_string())
                .or_default()
                .entry(condition)
                .or_default()
                .push((a.min(b), a.max(b)));
        }
        for (w, g) in &mut set.groups {
            for (c, pairs) in g.iter_mut() {
                let n = pairs.len();
                let mut seen = pairs.clone();
                seen.sort_unstable();
                seen.dedup();
                if seen.len() != n {
                    return Err(LexError::format(name, format!("duplicate {c} pair for {w}")));
                }
            }
        }
        Ok(set)
    }

    /// Every pair references existing sentences and satisfies its
    /// condition's predicate.
    pub fn check_against(&self, manifest: &Manifest) -> Result<()> {
        let owners = owner_table(manifest);
        for p in self.iter() {
            if !pair_satisfies(manifest, &owners, &p) {
                return Err(LexError::InvalidInput(format!(
                    "{} pair ({}, {}) for {} violates its condition",
                    p.condition, p.sent_a, p.sent_b, p.word
                )));
            }
        }
        Ok(())
    }
}

fn owner_table(manifest: &Manifest) -> Vec<(usize, SenseLabel)> {
    let mut owners = vec![(usize::MAX, SenseLabel::A); manifest.n_sentences()];
    for (wi, w) in manifest.words.iter().enumerate() {
        for s in &w.sentences {
            owners[s.sentence_id] = (wi, s.sense);
        }
    }
    owners
}

/// True when `other` may serve as a cross-lemma partner of `word`: a
/// different lemma (in either part of speech) that is not synonym-linked
/// to it in either direction.
pub fn unrelated(word: &WordEntry, other: &WordEntry) -> bool {
    let linked = |a: &WordEntry, lemma: &str| {
        a.synonym_a.as_deref() == Some(lemma) || a.synonym_b.as_deref() == Some(lemma)
    };
    word.lemma != other.lemma && !linked(word, &other.lemma) && !linked(other, &word.lemma)
}

/// Condition predicate for one pair.
pub fn pair_satisfies(manifest: &Manifest, owners: &[(usize, SenseLabel)], p: &ConditionPair) -> bool {
    use SenseLabel::*;
    let (Some(&(wa, sa)), Some(&(wb, sb))) = (owners.get(p.sent_a), owners.get(p.sent_b)) else {
        return false;
    };
    if p.sent_a == p.sent_b {
        return false;
    }
    let Some(wi) = manifest.word_index(&p.word) else {
        return false;
    };
    match p.condition {
        Condition::SL => wa == wi && wb == wi && sa == sb && !sa.is_synonym(),
        Condition::PS => wa == wi && wb == wi && matches!((sa, sb), (A, B) | (B, A)),
        Condition::SYN => {
            wa == wi
                && wb == wi
                && matches!((sa, sb), (A, SynA) | (SynA, A) | (B, SynB) | (SynB, B))
        }
        Condition::CL => {
            let (target, partner, ps) = if wa == wi { (sa, wb, sb) } else if wb == wi { (sb, wa, sa) } else {
                return false;
            };
            partner != wi
                && !target.is_synonym()
                && !ps.is_synonym()
                && unrelated(&manifest.words[wi], &manifest.words[partner])
        }
    }
}

fn norm(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

fn syn_senses(w: &WordEntry) -> Vec<(SenseLabel, SenseLabel)> {
    let mut out = Vec::new();
    if w.synonym_a.is_some() && w.count(SenseLabel::SynA) >= MIN_SYNONYM_SENTENCES {
        out.push((SenseLabel::A, SenseLabel::SynA));
    }
    if w.synonym_b.is_some() && w.count(SenseLabel::SynB) >= MIN_SYNONYM_SENTENCES {
        out.push((SenseLabel::B, SenseLabel::SynB));
    }
    out
}

/// Whether a word has enough synonym coverage for SYN pairs.
pub fn has_syn_coverage(w: &WordEntry) -> bool {
    !syn_senses(w).is_empty()
}

/// Pairs for one word and condition, sampled down to `cap` when there are
/// more admissible combinations. CL partners come from every manifest word.
pub fn build_pairs(store: &ActivationStore, word: &str, condition: Condition, cap: usize, seed: u64) -> Result<Vec<ConditionPair>> {
    build_pairs_in(store.manifest(), word, condition, cap, seed, None)
}

fn build_pairs_in(
    manifest: &Manifest,
    word: &str,
    condition: Condition,
    cap: usize,
    seed: u64,
    partner_pool: Option<&[usize]>,
) -> Result<Vec<ConditionPair>> {
    let wi = manifest
        .word_index(word)
        .ok_or_else(|| LexError::InvalidInput(format!("unknown word {word}")))?;
    let w = &manifest.words[wi];
    let ids_a = w.sentence_ids(SenseLabel::A);
    let ids_b = w.sentence_ids(SenseLabel::B);
    let admissible: Vec<(usize, usize)> = match condition {
        Condition::SL => {
            let mut out = Vec::new();
            for ids in [&ids_a, &ids_b] {
                for i in 0..ids.len() {
                    for j in i + 1..ids.len() {
                        out.push(norm(ids[i], ids[j]));
                    }
                }
            }
            out
        }
        Condition::PS => ids_a
            .iter()
            .flat_map(|&a| ids_b.iter().map(move |&b| norm(a, b)))
            .collect(),
        Condition::SYN => {
            let senses = syn_senses(w);
            if senses.is_empty() {
                return Err(LexError::NoSynonymCoverage(word.to_string()));
            }
            let mut out = Vec::new();
            for (own, syn) in senses {
                let syn_ids = w.sentence_ids(syn);
                for a in w.sentence_ids(own) {
                    for &s in &syn_ids {
                        out.push(norm(a, s));
                    }
                }
            }
            out
        }
        Condition::CL => {
            let pool: Vec<usize> = match partner_pool {
                Some(p) => p.to_vec(),
                None => (0..manifest.words.len()).collect(),
            };
            let mut partners: Vec<usize> = pool
                .into_iter()
                .filter(|&o| o != wi && unrelated(w, &manifest.words[o]))
                .filter(|&o| !manifest.words[o].own_sentence_ids().is_empty())
                .collect();
            partners.sort_by_key(|&o| manifest.words[o].key());
            if partners.is_empty() {
                return Err(LexError::InvalidInput(format!(
                    "{word}: no unrelated words available for cross-lemma pairs"
                )));
            }
            let mut rng = stream_rng(seed, named_stream(&[word, "CL", "partners"]));
            let offset = rng::index(&mut rng, partners.len());
            w.own_sentence_ids()
                .into_iter()
                .enumerate()
                .map(|(i, target)| {
                    let partner = &manifest.words[partners[(offset + i) % partners.len()]];
                    let rows = partner.own_sentence_ids();
                    norm(target, rows[rng::index(&mut rng, rows.len())])
                })
                .collect()
        }
    };
    let chosen: Vec<(usize, usize)> = if admissible.len() > cap {
        let mut rng = stream_rng(seed, named_stream(&[word, condition.as_str(), "cap"]));
        rng::sample_sorted(&mut rng, admissible.len(), cap)
            .into_iter()
            .map(|i| admissible[i])
            .collect()
    } else {
        admissible
    };
    Ok(chosen
        .into_iter()
        .map(|(a, b)| ConditionPair {
            word: word.to_string(),
            condition,
            sent_a: a,
            sent_b: b,
        })
        .collect())
}

/// Pairs for every eligible word. SYN is skipped for words without synonym
/// coverage; CL partners come from the eligible words only.
pub fn build_all_pairs(store: &ActivationStore, config: &PairConfig) -> Result<PairSet> {
    let manifest = store.manifest();
    let mut keys: Vec<String> = match &config.eligible_words {
        Some(list) => {
            for k in list {
                if manifest.word_index(k).is_none() {
                    return Err(LexError::InvalidInput(format!("unknown word {k}")));
                }
            }
            list.clone()
        }
        None => manifest.words.iter().map(WordEntry::key).collect(),
    };
    keys.sort();
    keys.dedup();
    let pool: Vec<usize> = keys.iter().filter_map(|k| manifest.word_index(k)).collect();

    let groups: Vec<(String, BTreeMap<Condition, Vec<(usize, usize)>>)> = keys
        .par_iter()
        .map(|key| {
            let mut g = BTreeMap::new();
            for cond in Condition::ALL {
                match build_pairs_in(manifest, key, cond, config.cap, config.seed, Some(&pool)) {
                    Ok(pairs) => {
                        g.insert(cond, pairs.into_iter().map(|p| (p.sent_a, p.sent_b)).collect());
                    }
                    Err(LexError::NoSynonymCoverage(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            Ok((key.clone(), g))
        })
        .collect::<Result<_>>()?;
    Ok(PairSet {
        cap: Some(config.cap),
        seed: Some(config.seed),
        groups: groups.into_iter().collect(),
    })
}
