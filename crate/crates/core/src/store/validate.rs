// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::manifest::{MAX_WUP_SIMILARITY, MIN_SENTENCES_PER_SENSE, SITE_SAE};
use super::{ActivationStore, SenseLabel};

/// Non-finite cells listed individually per matrix before collapsing the
/// rest into one summary entry.
const MAX_CELL_ENTRIES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Fatal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub severity: Severity,
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub word: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub site: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub row: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub col: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub entries: Vec<ValidationEntry>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fatal_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.severity == Severity::Fatal)
            .count()
    }

    pub fn has_fatal(&self) -> bool {
        self.fatal_count() > 0
    }

    fn push(&mut self, severity: Severity, code: &str, message: String) -> &mut ValidationEntry {
        self.entries.push(ValidationEntry {
            severity,
            code: code.into(),
            message,
            word: None,
            site: None,
            layer: None,
            row: None,
            col: None,
        });
        self.entries.last_mut().unwrap()
    }
}

/// Check every store invariant that `open` does not already enforce.
/// Violations become report entries; nothing here fails.
pub fn validate(store: &ActivationStore) -> ValidationReport {
    let mut report = ValidationReport::default();
    check_words(store, &mut report);
    check_matrices(store, &mut report);
    report
}

fn check_words(store: &ActivationStore, report: &mut ValidationReport) {
    for w in &store.manifest().words {
        let key = w.key();
        for sense in [SenseLabel::A, SenseLabel::B] {
            let n = w.count(sense);
            if n < 2 {
                report
                    .push(
                        Severity::Fatal,
                        "sense_count_critical",
                        format!(
                            "{key}: sense {} has {n} sentences; at least 2 are needed for selectivity",
                            sense.as_str()
                        ),
                    )
                    .word = Some(key.clone());
            } else if n < MIN_SENTENCES_PER_SENSE {
                report
                    .push(
                        Severity::Warning,
                        "sense_count_low",
                        format!(
                            "{key}: sense {} has {n} sentences, below {MIN_SENTENCES_PER_SENSE} sentences per sense",
                            sense.as_str()
                        ),
                    )
                    .word = Some(key.clone());
            }
        }
        for (link, sense) in [(&w.synonym_a, SenseLabel::SynA), (&w.synonym_b, SenseLabel::SynB)] {
            let rows = w.count(sense);
            match (link, rows) {
                (Some(lemma), 0) => {
                    report
                        .push(
                            Severity::Warning,
                            "dangling_synonym_link",
                            format!("{key}: synonym link {lemma:?} has no {} sentences", sense.as_str()),
                        )
                        .word = Some(key.clone());
                }
                (None, n) if n > 0 => {
                    report
                        .push(
                            Severity::Warning,
                            "unlinked_synonym_rows",
                            format!("{key}: {n} {} sentences but no synonym link", sense.as_str()),
                        )
                        .word = Some(key.clone());
                }
                _ => {}
            }
        }
        if !(0.0..=1.0).contains(&w.wup_similarity) {
            report
                .push(
                    Severity::Fatal,
                    "wup_out_of_range",
                    format!("{key}: wup_similarity {} outside [0, 1]", w.wup_similarity),
                )
                .word = Some(key.clone());
        } else if w.wup_similarity >= MAX_WUP_SIMILARITY {
            report
                .push(
                    Severity::Warning,
                    "wup_not_eligible",
                    format!(
                        "{key}: senses have Wu-Palmer similarity {} (>= {MAX_WUP_SIMILARITY}); not decomposition-eligible",
                        w.wup_similarity
                    ),
                )
                .word = Some(key.clone());
        }
    }
}

fn check_matrices(store: &ActivationStore, report: &mut ValidationReport) {
    let keys: Vec<_> = store.keys().cloned().collect();
    for key in keys {
        let m = match store.matrix(&key.site, key.layer) {
            Ok(m) => m,
            Err(e) => {
                let entry = report.push(Severity::Fatal, "matrix_unreadable", e.to_string());
                entry.site = Some(key.site.clone());
                entry.layer = Some(key.layer);
                continue;
            }
        };
        let file = key.file_name();
        let mut bad_cells = 0usize;
        let mut zero_rows = 0usize;
        let mut negative = 0usize;
        let is_sae = key.site == SITE_SAE;
        for (r, row) in m.iter_rows().enumerate() {
            for (c, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    bad_cells += 1;
                    if bad_cells <= MAX_CELL_ENTRIES {
                        let e = report.push(
                            Severity::Fatal,
                            "non_finite",
                            format!("{file}: non-finite value {v} at row {r}, col {c}"),
                        );
                        e.site = Some(key.site.clone());
                        e.layer = Some(key.layer);
                        e.row = Some(r);
                        e.col = Some(c);
                    }
                } else if is_sae && *v < 0.0 {
                    negative += 1;
                    if negative == 1 {
                        let e = report.push(
                            Severity::Fatal,
                            "negative_sae_activation",
                            format!("{file}: negative feature activation {v} at row {r}, col {c}"),
                        );
                        e.site = Some(key.site.clone());
                        e.layer = Some(key.layer);
                        e.row = Some(r);
                        e.col = Some(c);
                    }
                }
            }
            // SAE rows may legitimately be all zero (no feature fired).
            if !is_sae && m.cols() > 0 && row.iter().all(|&v| v == 0.0) {
                zero_rows += 1;
                if zero_rows == 1 {
                    let e = report.push(
                        Severity::Fatal,
                        "zero_row",
                        format!("{file}: row {r} is all zeros; overlap metrics are undefined on it"),
                    );
                    e.site = Some(key.site.clone());
                    e.layer = Some(key.layer);
                    e.row = Some(r);
                }
            }
        }
        let summaries = [
            (bad_cells.saturating_sub(MAX_CELL_ENTRIES), "non_finite", "non-finite cells"),
            (negative.saturating_sub(1), "negative_sae_activation", "negative cells"),
            (zero_rows.saturating_sub(1), "zero_row", "zero rows"),
        ];
        for (more, code, what) in summaries {
            if more > 0 {
                let e = report.push(Severity::Fatal, code, format!("{file}: {more} further {what}"));
                e.site = Some(key.site.clone());
                e.layer = Some(key.layer);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::fixtures::tiny_store;
    use crate::store::{ActivationStore, MatrixKey};

    #[test]
    fn clean_store_has_empty_report() {
        let (m, x) = tiny_store();
        let store = ActivationStore::from_parts(m, x).unwrap();
        let report = validate(&store);
        assert!(report.is_empty(), "{report:?}");
    }

    #[test]
    fn single_nan_gives_one_fatal_entry() {
        let (m, mut x) = tiny_store();
        let mat = x.get_mut(&MatrixKey::new("mlp_intermediate", 0)).unwrap();
        mat.row_mut(3)[1] = f32::NAN;
        let report = validate(&ActivationStore::from_parts(m, x).unwrap());
        assert_eq!(report.entries.len(), 1);
        let e = &report.entries[0];
        assert_eq!(e.severity, Severity::Fatal);
        assert_eq!((e.layer, e.row, e.col), (Some(0), Some(3), Some(1)));
        assert!(e.message.contains("row 3, col 1"));
    }

    #[test]
    fn low_sense_count_warns() {
        let (mut m, x) = tiny_store();
        // Turn one sense-A sentence of "bank" into a sense-B sentence.
        m.words[0].sentences[0].sense = SenseLabel::B;
        let report = validate(&ActivationStore::from_parts(m, x).unwrap());
        assert_eq!(report.entries.len(), 1);
        assert_eq!(report.entries[0].severity, Severity::Warning);
        assert!(report.entries[0].message.contains("below 5 sentences per sense"));
    }

    #[test]
    fn dangling_and_unlinked_synonyms() {
        let (mut m, x) = tiny_store();
        m.words[1].synonym_b = Some("coil".into());
        m.words[0].synonym_a = None;
        let report = validate(&ActivationStore::from_parts(m, x).unwrap());
        let codes: Vec<_> = report.entries.iter().map(|e| e.code.as_str()).collect();
        assert_eq!(codes, ["unlinked_synonym_rows", "dangling_synonym_link"]);
        assert!(!report.has_fatal());
    }

    #[test]
    fn zero_rows_and_wup() {
        let (mut m, mut x) = tiny_store();
        m.words[1].wup_similarity = 0.6;
        let mat = x.get_mut(&MatrixKey::new("mlp_intermediate", 1)).unwrap();
        mat.row_mut(4).fill(0.0);
        mat.row_mut(6).fill(0.0);
        let report = validate(&ActivationStore::from_parts(m, x).unwrap());
        let codes: Vec<_> = report.entries.iter().map(|e| e.code.as_str()).collect();
        assert_eq!(codes, ["wup_not_eligible", "zero_row", "zero_row"]);
        assert_eq!(report.fatal_count(), 2);
    }
}
