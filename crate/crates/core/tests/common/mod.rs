// SPDX-License-Identifier: MIT OR Apache-2.0

//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::ffi::OsStr;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use lexlens::intervene::{self, DiagnosticTokens, OutcomeBundle, OutcomeKind, OutcomeMeta, OutcomeSentence};
use lexlens::store::manifest::SenseLabel;
use lexlens::store::{ActivationStore, Matrix};
use lexlens::synth::{self, GroundTruth, SynthConfig};

/// The default synthetic store, generated once per test binary.
pub fn default_store() -> &'static (ActivationStore, GroundTruth) {
    static STORE: OnceLock<(ActivationStore, GroundTruth)> = OnceLock::new();
    STORE.get_or_init(|| synth::generate(&SynthConfig::default()).expect("default synth"))
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lexlens")
}

/// Run the CLI with the worker variable cleared.
pub fn lexlens<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<OsStr>,
{
    Command::new(bin())
        .args(args)
        .env_remove("LEXLENS_WORKERS")
        .output()
        .expect("spawn lexlens")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Every regular file under `dir`, keyed by path relative to it.
pub fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// A small outcome directory for a two-group ablation: the selective group
/// shifts mass between the senses' diagnostic tokens, the blind group
/// perturbs both senses alike.
pub fn sample_outcomes(word: &str) -> OutcomeBundle {
    let n = 8usize;
    let sentences: Vec<OutcomeSentence> = (0..n)
        .map(|i| OutcomeSentence { sentence_id: 100 + i, sense: if i < n / 2 { SenseLabel::A } else { SenseLabel::B } })
        .collect();
    let row = |i: usize, shift: f64, blur: f64| -> Vec<f32> {
        let a = i < n / 2;
        let (pa, pb) = if a { (0.5 - shift, 0.1 + shift) } else { (0.1 + shift, 0.5 - shift) };
        let rest = 1.0 - pa - pb;
        vec![pa as f32, pb as f32, (rest / 2.0 + blur) as f32, (rest / 2.0 - blur) as f32]
    };
    let matrix = |shift: f64, blur: f64| {
        let rows: Vec<Vec<f32>> = (0..n).map(|i| row(i, shift, blur)).collect();
        Matrix::from_rows(4, &rows).unwrap()
    };
    let groups = [intervene::Group::SenseASelective.as_str(), intervene::Group::SenseBlind.as_str()];
    let mut outputs = BTreeMap::new();
    outputs.insert(intervene::BASELINE.to_string(), matrix(0.0, 0.0));
    outputs.insert(groups[0].to_string(), matrix(0.15, 0.0));
    outputs.insert(groups[1].to_string(), matrix(0.0, 0.05));
    let mut perplexity = BTreeMap::new();
    for (g, bump_a, bump_b) in [(intervene::BASELINE, 0.0, 0.0), (groups[0], 2.0, 0.25), (groups[1], 0.2, 0.2)] {
        let m: BTreeMap<usize, f64> = sentences
            .iter()
            .map(|s| (s.sentence_id, 20.0 + if s.sense == SenseLabel::A { bump_a } else { bump_b }))
            .collect();
        perplexity.insert(g.to_string(), m);
    }
    OutcomeBundle {
        meta: OutcomeMeta {
            word: word.into(),
            kind: OutcomeKind::Probabilities,
            groups: groups.iter().map(|g| g.to_string()).collect(),
            sentences,
            diagnostic: Some(DiagnosticTokens { a: vec![0], b: vec![1] }),
        },
        outputs,
        perplexity,
    }
}
