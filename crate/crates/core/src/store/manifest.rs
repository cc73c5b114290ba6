// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LexError, Result};

pub const FORMAT_VERSION: u32 = 1;
/// Minimum sentences per sense before ingest warns.
pub const MIN_SENTENCES_PER_SENSE: usize = 5;
/// Words whose two senses are at least this Wu-Palmer similar are not
/// eligible for decomposition.
pub const MAX_WUP_SIMILARITY: f64 = 0.50;

pub const SITE_TOKEN_EMBEDDING: &str = "token_embedding";
pub const SITE_MLP: &str = "mlp_intermediate";
pub const SITE_SAE: &str = "sae_features";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model_name: String,
    pub n_layers: usize,
    pub sites: Vec<SiteDescriptor>,
    pub words: Vec<WordEntry>,
    pub format_version: u32,
    #[serde(default)]
    pub seed_note: String,
}

/// An activation capture point. `dim_per_layer[k] == 0` means the site was
/// not captured at layer `k` and has no matrix file there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteDescriptor {
    pub site_id: String,
    pub dim_per_layer: Vec<usize>,
}

impl SiteDescriptor {
    /// Number of layer slots this site is expected to have.
    pub fn expected_layers(&self, n_layers: usize) -> usize {
        if self.site_id == SITE_TOKEN_EMBEDDING {
            1
        } else {
            n_layers
        }
    }

    pub fn dim(&self, layer: usize) -> Option<usize> {
        self.dim_per_layer.get(layer).copied().filter(|&d| d > 0)
    }

    /// Layers at which the site has a matrix.
    pub fn captured_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.dim_per_layer
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > 0)
            .map(|(l, _)| l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartOfSpeech {
    Noun,
    Verb,
}

impl PartOfSpeech {
    pub fn tag(self) -> &'static str {
        match self {
            PartOfSpeech::Noun => "n",
            PartOfSpeech::Verb => "v",
        }
    }
}

/// Which sense a sentence row carries. Synonym rows are sentences of the
/// linked synonym lemma used in the same meaning as sense A or sense B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SenseLabel {
    A,
    B,
    #[serde(rename = "syn_a")]
    SynA,
    #[serde(rename = "syn_b")]
    SynB,
}

impl SenseLabel {
    pub fn is_synonym(self) -> bool {
        matches!(self, SenseLabel::SynA | SenseLabel::SynB)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SenseLabel::A => "A",
            SenseLabel::B => "B",
            SenseLabel::SynA => "syn_a",
            SenseLabel::SynB => "syn_b",
        }
    }
}

/// Provenance of synonym links.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkSource {
    #[default]
    Wordnet,
    EmbeddingNeighbors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentenceRecord {
    pub sentence_id: usize,
    pub sense: SenseLabel,
    /// Token position of the last subword of the target word.
    pub target_token_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordEntry {
    pub lemma: String,
    pub pos: PartOfSpeech,
    pub sense_a_id: String,
    pub sense_b_id: String,
    pub sentences: Vec<SentenceRecord>,
    #[serde(default)]
    pub synonym_a: Option<String>,
    #[serde(default)]
    pub synonym_b: Option<String>,
    pub wup_similarity: f64,
    #[serde(default)]
    pub link_source: LinkSource,
}

impl WordEntry {
    /// `lemma.pos` key, e.g. `bank.n`.
    pub fn key(&self) -> String {
        format!("{}.{}", self.lemma, self.pos.tag())
    }

    pub fn sentence_ids(&self, sense: SenseLabel) -> Vec<usize> {
        self.sentences
            .iter()
            .filter(|s| s.sense == sense)
            .map(|s| s.sentence_id)
            .collect()
    }

    /// Sense A and sense B rows, in manifest order.
    pub fn own_sentence_ids(&self) -> Vec<usize> {
        self.sentences
            .iter()
            .filter(|s| !s.sense.is_synonym())
            .map(|s| s.sentence_id)
            .collect()
    }

    pub fn synonym_sentence_ids(&self) -> Vec<usize> {
        self.sentences
            .iter()
            .filter(|s| s.sense.is_synonym())
            .map(|s| s.sentence_id)
            .collect()
    }

    pub fn count(&self, sense: SenseLabel) -> usize {
        self.sentences.iter().filter(|s| s.sense == sense).count()
    }

    pub fn has_synonym_rows(&self) -> bool {
        self.sentences.iter().any(|s| s.sense.is_synonym())
    }
}

impl fmt::Display for WordEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl Manifest {
    pub fn n_sentences(&self) -> usize {
        self.words.iter().map(|w| w.sentences.len()).sum()
    }

    pub fn site(&self, site_id: &str) -> Option<&SiteDescriptor> {
        self.sites.iter().find(|s| s.site_id == site_id)
    }

    pub fn word_index(&self, key: &str) -> Option<usize> {
        self.words.iter().position(|w| w.key() == key)
    }

    /// Parse manifest JSON and check the structural invariants every reader
    /// relies on. `name` labels errors.
    pub fn parse(name: &str, bytes: &[u8]) -> Result<Manifest> {
        let manifest: Manifest = serde_json::from_slice(bytes)
            .map_err(|e| LexError::format(name, format!("manifest JSON: {e}")))?;
        manifest
            .check_structure()
            .map_err(|cause| LexError::format(name, cause))?;
        Ok(manifest)
    }

    /// Canonical serialization: pretty JSON with a trailing newline.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("manifest serializes");
        out.push(b'\n');
        out
    }

    /// Invariants without which the store cannot be indexed.
    pub fn check_structure(&self) -> std::result::Result<(), String> {
        if self.format_version != FORMAT_VERSION {
            return Err(format!(
                "manifest format_version {} not supported (expected {FORMAT_VERSION})",
                self.format_version
            ));
        }
        if self.n_layers < 1 {
            return Err("n_layers must be at least 1".into());
        }
        let mut site_ids = BTreeSet::new();
        for site in &self.sites {
            if site.site_id.is_empty()
                || site.site_id.contains(['/', '\\'])
                || site.site_id.contains("__")
            {
                return Err(format!("invalid site id {:?}", site.site_id));
            }
            if !site_ids.insert(site.site_id.as_str()) {
                return Err(format!("duplicate site {:?}", site.site_id));
            }
            let expected = site.expected_layers(self.n_layers);
            if site.dim_per_layer.len() != expected {
                return Err(format!(
                    "site {} lists {} layer dims, expected {expected}",
                    site.site_id,
                    site.dim_per_layer.len()
                ));
            }
        }
        let mut keys = BTreeSet::new();
        for w in &self.words {
            if !keys.insert(w.key()) {
                return Err(format!("duplicate word {}", w.key()));
            }
        }
        let n = self.n_sentences();
        let mut seen = vec![false; n];
        for w in &self.words {
            for s in &w.sentences {
                match seen.get_mut(s.sentence_id) {
                    None => {
                        return Err(format!(
                            "word {} references sentence {} outside 0..{n}",
                            w.key(),
                            s.sentence_id
                        ))
                    }
                    Some(true) => {
                        return Err(format!("sentence {} referenced twice", s.sentence_id))
                    }
                    Some(slot) => *slot = true,
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> Manifest {
        let sent = |id, sense| SentenceRecord {
            sentence_id: id,
            sense,
            target_token_index: 3,
            text: None,
        };
        Manifest {
            model_name: "toy".into(),
            n_layers: 2,
            sites: vec![
                SiteDescriptor {
                    site_id: SITE_MLP.into(),
                    dim_per_layer: vec![4, 4],
                },
                SiteDescriptor {
                    site_id: SITE_TOKEN_EMBEDDING.into(),
                    dim_per_layer: vec![4],
                },
            ],
            words: vec![WordEntry {
                lemma: "bank".into(),
                pos: PartOfSpeech::Noun,
                sense_a_id: "bank.n.01".into(),
                sense_b_id: "bank.n.02".into(),
                sentences: vec![sent(0, SenseLabel::A), sent(1, SenseLabel::B), sent(2, SenseLabel::SynA)],
                synonym_a: Some("depository".into()),
                synonym_b: None,
                wup_similarity: 0.2,
                link_source: LinkSource::Wordnet,
            }],
            format_version: 1,
            seed_note: String::new(),
        }
    }

    #[test]
    fn json_round_trip() {
        let m = manifest();
        let back = Manifest::parse("m", &m.to_json_bytes()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn sense_labels_serialize_as_documented() {
        let json = serde_json::to_string(&[SenseLabel::A, SenseLabel::SynB]).unwrap();
        assert_eq!(json, r#"["A","syn_b"]"#);
    }

    #[test]
    fn structural_errors() {
        let mut m = manifest();
        m.format_version = 2;
        assert!(m.check_structure().unwrap_err().contains("format_version"));

        let mut m = manifest();
        m.words[0].sentences[1].sentence_id = 0;
        assert!(m.check_structure().unwrap_err().contains("twice"));

        let mut m = manifest();
        m.words[0].sentences[1].sentence_id = 9;
        assert!(m.check_structure().unwrap_err().contains("outside"));

        let mut m = manifest();
        m.sites[1].dim_per_layer = vec![4, 4];
        assert!(m.check_structure().unwrap_err().contains("layer dims"));

        let mut m = manifest();
        let dup = m.words[0].clone();
        m.words.push(dup);
        assert!(m.check_structure().is_err());

        let mut m = manifest();
        m.n_layers = 0;
        m.sites.clear();
        assert!(m.check_structure().is_err());
    }

    #[test]
    fn same_lemma_different_pos_is_allowed() {
        let mut m = manifest();
        let mut verb = m.words[0].clone();
        verb.pos = PartOfSpeech::Verb;
        verb.sentences = vec![SentenceRecord {
            sentence_id: 3,
            sense: SenseLabel::A,
            target_token_index: 0,
            text: None,
        }];
        m.words.push(verb);
        m.check_structure().unwrap();
        assert_eq!(m.word_index("bank.v"), Some(1));
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = String::from_utf8(manifest().to_json_bytes()).unwrap();
        let text = text.replacen("\"model_name\"", "\"bogus\": 1, \"model_name\"", 1);
        assert!(Manifest::parse("m", text.as_bytes()).is_err());
    }
}
