// SPDX-License-Identifier: MIT OR Apache-2.0

//! Report envelopes and the long-format CSV writers that have no better home.
//!
//! Every JSON report is `{tool, version, command, config, store_hash,
//! warnings, result}`. Maps are ordered and nothing time-dependent is
//! recorded, so identical inputs give identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LexError, Result};
use crate::lis::DoseResponse;
use crate::neurons::AdjustedScores;

pub const TOOL: &str = "lexlens";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub store_hash: Option<String>,
    pub warnings: Vec<String>,
    pub result: T,
}

impl<T: Serialize> Report<T> {
    pub fn new(command: &str, config: &impl Serialize, store_hash: Option<String>, result: T) -> Result<Self> {
        Ok(Report {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: serde_json::to_value(config)?,
            store_hash,
            warnings: Vec::new(),
            result,
        })
    }

    pub fn with_warnings(mut self, warnings: Vec<String>) -> Self {
        self.warnings = warnings;
        self
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }
}

pub fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LexError::io(dir, e))?;
    let p = dir.join(name);
    std::fs::write(&p, bytes).map_err(|e| LexError::io(&p, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// `k,ps_minus_syn,r_lex,delta_ps,delta_syn,gap_reduction`.
pub fn dose_csv(d: &DoseResponse) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["k", "ps_minus_syn", "r_lex", "delta_ps", "delta_syn", "gap_reduction"])?;
    for r in &d.rows {
        w.write_record([
            r.k.to_string(),
            format!("{}", r.ps_minus_syn),
            opt(r.r_lex),
            format!("{}", r.delta_ps),
            format!("{}", r.delta_syn),
            opt(r.gap_reduction),
        ])?;
    }
    w.into_inner().map_err(|e| LexError::InvalidInput(e.to_string()))
}

/// `layer,neuron,p_raw,form_flag,p_adj`.
pub fn adjusted_csv(layers: &[(usize, AdjustedScores)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "neuron", "p_raw", "form_flag", "p_adj"])?;
    for (layer, a) in layers {
        for s in &a.scores {
            w.write_record([
                layer.to_string(),
                s.neuron.to_string(),
                format!("{}", s.p_raw),
                u8::from(s.form_flag).to_string(),
                format!("{}", s.p_adj),
            ])?;
        }
    }
    w.into_inner().map_err(|e| LexError::InvalidInput(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_is_stable() {
        let a = Report::new("x", &serde_json::json!({"b": 1, "a": 2}), None, vec![1.5, f64::NAN]).unwrap();
        let bytes = a.to_json_bytes().unwrap();
        assert_eq!(bytes, a.to_json_bytes().unwrap());
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(v["result"][1], serde_json::Value::Null);
        assert_eq!(v["tool"], "lexlens");
    }
}
