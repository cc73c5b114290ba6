// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end runs of the `lexlens` binary.

mod common;

use std::path::{Path, PathBuf};

use serde_json::Value;

use lexlens::intervene;
use lexlens::synth::SynthConfig;

use common::{lexlens, read_tree, sample_outcomes, stderr, stdout};

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn synth(dir: &Path, preset: &str) {
    let o = lexlens(["synth", "--preset", preset, "--out", p(dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

#[test]
fn synth_then_decompose_populates_intervals() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("s");
    synth(&store, "default");
    let out = tmp.path().join("d");
    let o = lexlens(["decompose", "--store", p(&store), "--bootstrap", "500", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&out.join("decomposition.json"));
    for l in r["result"]["decomposition"]["layers"].as_array().unwrap() {
        let e = &l["r_lex"];
        assert!(e["value"].is_f64() && e["ci_lo"].is_f64() && e["ci_hi"].is_f64(), "{e}");
        assert!(e["ci_lo"].as_f64() <= e["value"].as_f64() && e["value"].as_f64() <= e["ci_hi"].as_f64());
    }
    assert!(out.join("decomposition.csv").exists());
}

#[test]
fn store_without_synonyms_reports_the_nested_ratio_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { synonym_sentences_per_sense: 0, n_words: 12, d: 128, lis_dim: 8, ..SynthConfig::default() };
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let store = tmp.path().join("s");
    let o = lexlens(["synth", "--config", p(&cfg_path), "--out", p(&store)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("d");
    let o = lexlens(["decompose", "--store", p(&store), "--bootstrap", "200", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&out.join("decomposition.json"));
    for l in r["result"]["decomposition"]["layers"].as_array().unwrap() {
        assert!(l["r_lex"].is_null(), "{}", l["r_lex"]);
        assert!(l["r_lex_no_syn"]["value"].is_f64());
    }
    assert!(!r["warnings"].as_array().unwrap().is_empty());
}

/// Run every command against small stores and collect the output directories.
fn run_all(tmp: &Path) -> Vec<PathBuf> {
    let store = tmp.join("store");
    synth(&store, "small");
    let sae = tmp.join("sae");
    assert!(lexlens(["synth", "--sae", "--out", p(&sae)]).status.success());
    let outcomes = tmp.join("outcomes");
    intervene::write_outcomes(&outcomes, &sample_outcomes("w000.n")).unwrap();
    let s = p(&store).to_string();
    let runs: Vec<(&str, Vec<&str>, i32)> = vec![
        ("validate", vec!["validate", "--store", &s], 0),
        ("pairs", vec!["pairs", "--store", &s], 0),
        ("decompose", vec!["decompose", "--store", &s, "--bootstrap", "200"], 0),
        ("ssi", vec!["ssi", "--store", &s], 0),
        ("form", vec!["form-detectors", "--store", &s], 0),
        ("adjust", vec!["adjust", "--store", &s], 0),
        ("lis", vec!["lis", "--store", &s, "--k", "4"], 0),
        ("dose", vec!["dose-response", "--store", &s, "--ks", "0,2,4"], 0),
        ("probe", vec!["probe", "--store", &s, "--words", "w000.n", "--scheme", "kfold"], 0),
        ("plan", vec!["plan-ablation", "--store", &s, "--word", "w000.n"], 0),
        ("analyze", vec!["analyze-ablation", "--outcomes", p(&outcomes)], 0),
        ("sae", vec!["sae-collision", "--store", p(&sae)], 0),
        // The small preset is too small for the default recovery thresholds.
        ("oracle", vec!["oracle-check", "--store", &s], 1),
    ];
    let mut dirs = vec![outcomes.clone()];
    for (name, mut args, code) in runs {
        let out = tmp.join(format!("out-{name}"));
        args.extend(["--out", p(&out)]);
        let o = lexlens(&args);
        assert_eq!(o.status.code(), Some(code), "{name}: {}", stderr(&o));
        dirs.push(out);
    }
    dirs
}

#[test]
fn every_report_matches_its_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let mut checked = 0;
    for dir in run_all(tmp.path()) {
        for (rel, bytes) in read_tree(&dir) {
            let name = rel.to_str().unwrap();
            if !name.ends_with(".json") || name.starts_with("lis_layer") {
                continue;
            }
            let schema_path = schema_dir().join(name.replace(".json", ".schema.json"));
            assert!(schema_path.exists(), "no schema for {name}");
            let validator = jsonschema::validator_for(&json(&schema_path)).unwrap();
            let instance: Value = serde_json::from_slice(&bytes).unwrap();
            let errors: Vec<String> = validator.iter_errors(&instance).map(|e| format!("{} at {}", e, e.instance_path())).collect();
            assert!(errors.is_empty(), "{name}: {errors:#?}");
            checked += 1;
        }
    }
    assert_eq!(checked, 15);
}

#[test]
fn oracle_check_prints_one_line_per_check() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("s");
    synth(&store, "default");
    let o = lexlens(["oracle-check", "--store", p(&store), "--out", p(&tmp.path().join("o"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(!out.contains("FAIL "), "{out}");
    let card = json(&tmp.path().join("o/oracle_check.json"));
    let passes = out.lines().filter(|l| l.starts_with("PASS ")).count();
    assert_eq!(passes, card["result"]["checks"].as_array().unwrap().len());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(lexlens(["bogus"]).status.code(), Some(64));
    assert_eq!(lexlens(["decompose", "--no-such-flag"]).status.code(), Some(64));
    assert_eq!(lexlens(["--help"]).status.code(), Some(0));
    assert_eq!(lexlens(["--version"]).status.code(), Some(0));
    let missing = tmp.path().join("nowhere");
    let o = lexlens(["ssi", "--store", p(&missing), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("manifest.json"), "{}", stderr(&o));
    let o = lexlens(["synth", "--preset", "huge", "--out", p(&tmp.path().join("x"))]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn nan_cell_fails_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("s");
    synth(&store, "small");
    let f = store.join("mlp_intermediate__layer0.lexa");
    let mut b = std::fs::read(&f).unwrap();
    b[32..36].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&f, b).unwrap();
    let out = tmp.path().join("v");
    let o = lexlens(["validate", "--store", p(&store), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let r = json(&out.join("validation.json"));
    assert!(r["result"].to_string().contains("fatal"), "{}", r["result"]);
}

#[test]
fn worker_count_source_does_not_matter() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("s");
    synth(&store, "small");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(lexlens(["--workers", "2", "ssi", "--store", p(&store), "--out", p(&a)]).status.success());
    let o = std::process::Command::new(common::bin())
        .args(["ssi", "--store", p(&store), "--out", p(&b)])
        .env("LEXLENS_WORKERS", "5")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(read_tree(&a), read_tree(&b));
}
