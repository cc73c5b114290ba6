// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `lexlens` command line.
//!
//! Exit codes: 0 success, 1 analysis failure (including failed oracle
//! checks), 2 invalid or corrupt input, 64 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::decompose;
use crate::error::{LexError, Result};
use crate::intervene::{self, LayerSelection};
use crate::lis;
use crate::neurons::{self, Thresholds};
use crate::oracle::{self, OracleConfig};
use crate::overlap::Metric;
use crate::pairing::{self, PairConfig, PairSet};
use crate::probe::{self, ProbeConfig, Scheme, TaskKind};
use crate::report::{self, Report};
use crate::saecollide::{self, CollisionThresholds};
use crate::stats::{self, BootstrapConfig};
use crate::store::manifest::{LinkSource, SITE_MLP, SITE_SAE, SITE_TOKEN_EMBEDDING};
use crate::store::{self as st, ActivationStore};
use crate::synth::{self, GroundTruth, SaeSynthConfig, SynthConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "lexlens", version, about = "Lexical versus semantic neuron overlap analysis")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, env = "LEXLENS_WORKERS")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct StoreArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value = SITE_MLP)]
    pub site: String,
    /// Comma-separated layer list; default every captured layer of the site.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricArg {
    Cosine,
    Jaccard,
    MagDiv,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Metric {
        match m {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::Jaccard => Metric::Jaccard,
            MetricArg::MagDiv => Metric::MagDiv,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceArg {
    Wordnet,
    EmbeddingNeighbors,
}

impl From<SourceArg> for LinkSource {
    fn from(s: SourceArg) -> LinkSource {
        match s {
            SourceArg::Wordnet => LinkSource::Wordnet,
            SourceArg::EmbeddingNeighbors => LinkSource::EmbeddingNeighbors,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PairArgs {
    /// Pair cap per word and condition.
    #[arg(long, default_value_t = pairing::DEFAULT_CAP)]
    pub cap: usize,
    /// Use a pair CSV instead of sampling.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ValidateArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub common: StoreArgs,
    #[command(flatten)]
    pub pair: PairArgs,
    #[arg(long, value_enum, default_value = "cosine")]
    pub metric: MetricArg,
    #[arg(long, default_value_t = stats::DEFAULT_RESAMPLES)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = stats::DEFAULT_LEVEL)]
    pub level: f64,
    /// Also decompose the token-embedding site and compare with the first layer.
    #[arg(long)]
    pub embedding_baseline: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SsiArgs {
    #[command(flatten)]
    pub common: StoreArgs,
    #[arg(long, default_value_t = neurons::THETA_SELECTIVE)]
    pub theta_selective: f64,
    #[arg(long, default_value_t = neurons::THETA_BLIND)]
    pub theta_blind: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FormArgs {
    #[command(flatten)]
    pub common: StoreArgs,
    #[arg(long, default_value_t = neurons::DEFAULT_TOP_K)]
    pub k: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AdjustArgs {
    #[command(flatten)]
    pub common: StoreArgs,
    #[command(flatten)]
    pub pair: PairArgs,
    /// Lexical ratio to use at every layer; default: each layer's own estimate.
    #[arg(long)]
    pub r_lex: Option<f64>,
    #[arg(long, default_value_t = neurons::DEFAULT_TOP_K)]
    pub k: usize,
    #[arg(long, default_value_t = neurons::DEFAULT_QUANTILE)]
    pub quantile: f64,
    #[arg(long, default_value_t = neurons::DEFAULT_FLAG_THRESHOLD)]
    pub flag_threshold: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LisArgs {
    #[command(flatten)]
    pub common: StoreArgs,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "wordnet")]
    pub source: SourceArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DoseArgs {
    #[command(flatten)]
    pub common: StoreArgs,
    #[command(flatten)]
    pub pair: PairArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,5,10,20")]
    pub ks: Vec<usize>,
    #[arg(long, value_enum, default_value = "cosine")]
    pub metric: MetricArg,
    #[arg(long, value_enum, default_value = "wordnet")]
    pub source: SourceArg,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeArg {
    Loo,
    Kfold,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: StoreArgs,
    /// Word keys to probe; default all.
    #[arg(long, value_delimiter = ',')]
    pub words: Vec<String>,
    #[arg(long, value_enum, default_value = "loo")]
    pub scheme: SchemeArg,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = probe::DEFAULT_C)]
    pub c: f64,
    #[arg(long)]
    pub no_standardize: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PlanArgs {
    #[command(flatten)]
    pub common: StoreArgs,
    #[arg(long)]
    pub word: String,
    #[arg(long, default_value_t = neurons::THETA_SELECTIVE)]
    pub theta_selective: f64,
    #[arg(long, default_value_t = neurons::THETA_BLIND)]
    pub theta_blind: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub outcomes: PathBuf,
    /// JSON `{"A": [columns], "B": [columns]}`; overrides outcomes.json.
    #[arg(long)]
    pub diagnostic: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SaeArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[arg(long, default_value_t = saecollide::FIRING_RATE_MIN)]
    pub firing_rate_min: f64,
    #[arg(long, default_value_t = saecollide::BLIND_D_MAX)]
    pub blind_d_max: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value = "default")]
    pub preset: String,
    /// SynthConfig JSON; replaces the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the lexical/semantic strengths for this ratio.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Generate an SAE-feature store instead.
    #[arg(long)]
    pub sae: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OracleArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Ground truth JSON; default `<store>/ground_truth.json`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = neurons::DEFAULT_TOP_K)]
    pub k: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a store against every format and design invariant.
    Validate(ValidateArgs),
    /// Sample condition pairs and write them as CSV.
    Pairs {
        #[command(flatten)]
        common: StoreArgs,
        #[command(flatten)]
        pair: PairArgs,
    },
    /// Condition means, R_lex with bootstrap CIs, interaction and PS-vs-SYN tests.
    Decompose(DecomposeArgs),
    /// Sense selectivity per neuron and word, with selective/blind classes.
    Ssi(SsiArgs),
    /// Rank word-form detectors per word.
    FormDetectors(FormArgs),
    /// Raw and form-adjusted polysemanticity scores.
    Adjust(AdjustArgs),
    /// Fit lexical-identity subspaces from synonym difference vectors.
    Lis(LisArgs),
    /// Remove top-k LIS directions and recompute the PS-SYN gap.
    DoseResponse(DoseArgs),
    /// Logistic-regression probes on neuron groups.
    Probe(ProbeArgs),
    /// Write a mean-ablation plan for one word.
    PlanAblation(PlanArgs),
    /// Analyze an exported outcome directory.
    AnalyzeAblation(AnalyzeArgs),
    /// SAE feature collision ratios.
    SaeCollision(SaeArgs),
    /// Generate a synthetic store with planted ground truth.
    Synth(SynthArgs),
    /// Score pipeline recovery on a synthetic store.
    OracleCheck(OracleArgs),
}

/// How a command failed, for exit-code mapping.
#[derive(Debug)]
enum Failure {
    Lex(LexError),
    Invalid(String),
    Checks(String),
}

impl From<LexError> for Failure {
    fn from(e: LexError) -> Self {
        Failure::Lex(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return EXIT_USAGE;
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_FAILURE;
        }
    };
    match pool.install(|| dispatch(&cli.command)) {
        Ok(()) => EXIT_OK,
        Err(Failure::Lex(e)) => {
            eprintln!("error: {e}");
            match e {
                LexError::Format { .. } | LexError::DimensionMismatch(_) => EXIT_INVALID,
                LexError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_INVALID,
                _ => EXIT_FAILURE,
            }
        }
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            EXIT_INVALID
        }
        Err(Failure::Checks(msg)) => {
            eprintln!("{msg}");
            EXIT_FAILURE
        }
    }
}

fn dispatch(cmd: &Command) -> CmdResult {
    match cmd {
        Command::Validate(a) => cmd_validate(a),
        Command::Pairs { common, pair } => cmd_pairs(common, pair),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Ssi(a) => cmd_ssi(a),
        Command::FormDetectors(a) => cmd_form(a),
        Command::Adjust(a) => cmd_adjust(a),
        Command::Lis(a) => cmd_lis(a),
        Command::DoseResponse(a) => cmd_dose(a),
        Command::Probe(a) => cmd_probe(a),
        Command::PlanAblation(a) => cmd_plan(a),
        Command::AnalyzeAblation(a) => cmd_analyze(a),
        Command::SaeCollision(a) => cmd_sae(a),
        Command::Synth(a) => cmd_synth(a),
        Command::OracleCheck(a) => cmd_oracle(a),
    }
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    report::write_file(dir, name, bytes)?;
    println!("{}", dir.join(name).display());
    Ok(())
}

fn write_report<T: Serialize>(dir: &Path, name: &str, r: &Report<T>) -> Result<()> {
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    write(dir, name, &r.to_json_bytes()?)
}

fn open(path: &Path) -> Result<(ActivationStore, String)> {
    let store = ActivationStore::open(path)?;
    let hash = store.content_hash()?;
    Ok((store, hash))
}

fn layers_for(store: &ActivationStore, site: &str, requested: &[usize]) -> Result<Vec<usize>> {
    let captured: Vec<usize> = store
        .keys()
        .filter(|k| k.site == site)
        .map(|k| k.layer)
        .collect();
    if captured.is_empty() {
        return Err(LexError::InvalidInput(format!("store has no site `{site}`")));
    }
    if requested.is_empty() {
        return Ok(captured);
    }
    for l in requested {
        if !captured.contains(l) {
            return Err(LexError::OutOfRange(format!("layer {l} not captured for site {site}")));
        }
    }
    let mut v = requested.to_vec();
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

fn load_pairs(store: &ActivationStore, common: &StoreArgs, pair: &PairArgs) -> Result<PairSet> {
    match &pair.pairs {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| LexError::io(p, e))?;
            let set = PairSet::from_csv(&p.display().to_string(), &bytes)?;
            set.check_against(store.manifest())?;
            Ok(set)
        }
        None => pairing::build_all_pairs(
            store,
            &PairConfig { cap: pair.cap, seed: common.seed, eligible_words: None },
        ),
    }
}

fn cmd_validate(a: &ValidateArgs) -> CmdResult {
    let store = ActivationStore::open(&a.store)?;
    let rep = st::validate(&store);
    let hash = store.content_hash()?;
    for e in &rep.entries {
        eprintln!("{:?} {}: {}", e.severity, e.code, e.message);
    }
    if let Some(out) = &a.out {
        write_report(out, "validation.json", &Report::new("validate", a, Some(hash), &rep)?)?;
    }
    if rep.has_fatal() {
        return Err(Failure::Invalid(format!("{} fatal validation entries", rep.fatal_count())));
    }
    Ok(())
}

fn cmd_pairs(common: &StoreArgs, pair: &PairArgs) -> CmdResult {
    let (store, hash) = open(&common.store)?;
    let set = load_pairs(&store, common, pair)?;
    write(&common.out, "pairs.csv", &set.to_csv()?)?;
    #[derive(Serialize)]
    struct Echo<'a> {
        common: &'a StoreArgs,
        pair: &'a PairArgs,
    }
    #[derive(Serialize)]
    struct Counts {
        total: usize,
        syn_covered: Vec<String>,
        per_word: BTreeMap<String, BTreeMap<pairing::Condition, usize>>,
    }
    let counts = Counts {
        total: set.total(),
        syn_covered: set.syn_covered().into_iter().map(String::from).collect(),
        per_word: set.counts(),
    };
    write_report(&common.out, "pairs.json", &Report::new("pairs", &Echo { common, pair }, Some(hash), counts)?)?;
    Ok(())
}

fn cmd_decompose(a: &DecomposeArgs) -> CmdResult {
    let (store, hash) = open(&a.common.store)?;
    let layers = layers_for(&store, &a.common.site, &a.common.layers)?;
    let pairs = load_pairs(&store, &a.common, &a.pair)?;
    let boot = (a.bootstrap > 0).then_some(BootstrapConfig { n_resamples: a.bootstrap, seed: a.common.seed, level: a.level });
    let metric = Metric::from(a.metric);
    let result = decompose::decompose_layers(&store, &pairs, &a.common.site, &layers, metric, boot.as_ref())?;
    let mut warnings: Vec<String> = result
        .layers
        .iter()
        .flat_map(|l| l.warnings.iter().map(move |w| format!("layer {}: {w}", l.layer)))
        .collect();
    let embedding = if a.embedding_baseline {
        if store.has_matrix(SITE_TOKEN_EMBEDDING, 0) {
            let emb = decompose::decompose_layers(&store, &pairs, SITE_TOKEN_EMBEDDING, &[0], metric, boot.as_ref())?;
            match decompose::embedding_baseline(&result, &emb) {
                Ok(c) => Some(c),
                Err(e) => {
                    warnings.push(format!("embedding baseline: {e}"));
                    None
                }
            }
        } else {
            warnings.push("embedding baseline requested but the store has no token_embedding site".into());
            None
        }
    } else {
        None
    };
    #[derive(Serialize)]
    struct Out<'a> {
        decomposition: &'a decompose::DecompositionResult,
        embedding_baseline: Option<decompose::EmbeddingComparison>,
    }
    write(&a.common.out, "decomposition.csv", &result.to_csv()?)?;
    let r = Report::new("decompose", a, Some(hash), Out { decomposition: &result, embedding_baseline: embedding })?
        .with_warnings(warnings);
    write_report(&a.common.out, "decomposition.json", &r)?;
    Ok(())
}

fn classify_layer(store: &ActivationStore, layer: usize, site: &str, t: &Thresholds) -> Result<(Vec<neurons::SsiVector>, Vec<neurons::NeuronClassification>)> {
    let v = neurons::ssi_layer(store, layer, site)?;
    let c = v.iter().map(|v| neurons::classify(v, t)).collect();
    Ok((v, c))
}

fn cmd_ssi(a: &SsiArgs) -> CmdResult {
    let (store, hash) = open(&a.common.store)?;
    let layers = layers_for(&store, &a.common.site, &a.common.layers)?;
    let t = Thresholds { selective: a.theta_selective, blind: a.theta_blind };
    let mut all_v = Vec::new();
    let mut all_c = Vec::new();
    let mut fractions = Vec::new();
    for &l in &layers {
        let (v, c) = classify_layer(&store, l, &a.common.site, &t)?;
        fractions.push(neurons::selective_fractions(l, store.dim(&a.common.site, l)?, &c));
        all_v.extend(v);
        all_c.extend(c);
    }
    write(&a.common.out, "ssi.csv", &neurons::ssi_csv(&all_v)?)?;
    write(&a.common.out, "classification.csv", &neurons::classification_csv(&all_c)?)?;
    #[derive(Serialize)]
    struct Out {
        thresholds: Thresholds,
        selective_fractions: Vec<neurons::SelectiveFractions>,
        classifications: Vec<neurons::NeuronClassification>,
    }
    let r = Report::new("ssi", a, Some(hash), Out { thresholds: t, selective_fractions: fractions, classifications: all_c })?;
    write_report(&a.common.out, "ssi.json", &r)?;
    Ok(())
}

fn cmd_form(a: &FormArgs) -> CmdResult {
    let (store, hash) = open(&a.common.store)?;
    let layers = layers_for(&store, &a.common.site, &a.common.layers)?;
    let mut rankings = Vec::new();
    let mut overlaps = Vec::new();
    #[derive(Serialize)]
    struct WordOverlap {
        word: String,
        layer: usize,
        top: Vec<usize>,
        overlap: neurons::FormBlindOverlap,
    }
    for &l in &layers {
        let r = neurons::form_detectors_layer(&store, l, &a.common.site, a.k)?;
        let (_, c) = classify_layer(&store, l, &a.common.site, &Thresholds::default())?;
        for (r, c) in r.iter().zip(&c) {
            overlaps.push(WordOverlap { word: r.word.clone(), layer: l, top: r.top_neurons(), overlap: neurons::form_blind_overlap(c, r)? });
        }
        rankings.extend(r);
    }
    write(&a.common.out, "form_detectors.csv", &neurons::ranking_csv(&rankings)?)?;
    write_report(&a.common.out, "form_detectors.json", &Report::new("form-detectors", a, Some(hash), overlaps)?)?;
    Ok(())
}

fn cmd_adjust(a: &AdjustArgs) -> CmdResult {
    let (store, hash) = open(&a.common.store)?;
    let site = &a.common.site;
    let layers = layers_for(&store, site, &a.common.layers)?;
    let per_layer_r: BTreeMap<usize, f64> = match a.r_lex {
        Some(r) => layers.iter().map(|&l| (l, r)).collect(),
        None => {
            let pairs = load_pairs(&store, &a.common, &a.pair)?;
            let d = decompose::decompose_layers(&store, &pairs, site, &layers, Metric::Cosine, None)?;
            let mut m = BTreeMap::new();
            for l in &d.layers {
                let r = l
                    .r_lex
                    .or(l.r_lex_no_syn)
                    .ok_or_else(|| LexError::Undefined(format!("layer {}: no R_lex estimate; pass --r-lex", l.layer)))?;
                m.insert(l.layer, r.value);
            }
            m
        }
    };
    let mut out = Vec::new();
    for &l in &layers {
        let p = neurons::raw_polysemanticity(&store, l, site, a.quantile)?;
        let rankings = neurons::form_detectors_layer(&store, l, site, a.k)?;
        let flags = neurons::form_flags(p.len(), &rankings);
        let scores = neurons::adjusted_score(&p, &flags, per_layer_r[&l], neurons::mean_p(&p), a.flag_threshold)?;
        out.push((l, scores));
    }
    write(&a.common.out, "adjusted.csv", &report::adjusted_csv(&out)?)?;
    #[derive(Serialize)]
    struct LayerOut {
        layer: usize,
        r_lex: f64,
        mean_p_raw: f64,
        lambda: f64,
        flag_threshold: f64,
        n_form_flagged: usize,
        reclassified: Vec<usize>,
    }
    let summary: Vec<LayerOut> = out
        .iter()
        .map(|(l, s)| LayerOut {
            layer: *l,
            r_lex: s.r_lex,
            mean_p_raw: s.mean_p_raw,
            lambda: s.lambda,
            flag_threshold: s.flag_threshold,
            n_form_flagged: s.scores.iter().filter(|x| x.form_flag).count(),
            reclassified: s.reclassified.clone(),
        })
        .collect();
    write_report(&a.common.out, "adjusted.json", &Report::new("adjust", a, Some(hash), summary)?)?;
    Ok(())
}

fn cmd_lis(a: &LisArgs) -> CmdResult {
    let (store, hash) = open(&a.common.store)?;
    let layers = layers_for(&store, &a.common.site, &a.common.layers)?;
    #[derive(Serialize)]
    struct LayerOut {
        layer: usize,
        k: usize,
        n_words: usize,
        explained_variance_ratio: Vec<f64>,
        files: [String; 2],
    }
    let mut out = Vec::new();
    for &l in &layers {
        let dv = lis::difference_vectors(&store, l, &a.common.site, a.source.into())?;
        let m = lis::fit_lis(&dv, a.k)?;
        let stem = format!("lis_layer{l}");
        lis::write_lis(&m, &a.common.out, &stem)?;
        out.push(LayerOut {
            layer: l,
            k: m.k(),
            n_words: m.n_words,
            explained_variance_ratio: m.explained_variance_ratio.clone(),
            files: [format!("{stem}.lexa"), format!("{stem}.json")],
        });
    }
    write_report(&a.common.out, "lis.json", &Report::new("lis", a, Some(hash), out)?)?;
    Ok(())
}

fn cmd_dose(a: &DoseArgs) -> CmdResult {
    let (store, hash) = open(&a.common.store)?;
    let layers = layers_for(&store, &a.common.site, &a.common.layers)?;
    let pairs = load_pairs(&store, &a.common, &a.pair)?;
    let d = lis::dose_response(&store, &pairs, &layers, &a.ks, &a.common.site, a.metric.into(), a.source.into())?;
    write(&a.common.out, "dose_response.csv", &report::dose_csv(&d)?)?;
    write_report(&a.common.out, "dose_response.json", &Report::new("dose-response", a, Some(hash), &d)?)?;
    Ok(())
}

fn cmd_probe(a: &ProbeArgs) -> CmdResult {
    let (store, hash) = open(&a.common.store)?;
    let site = &a.common.site;
    let layers = layers_for(&store, site, &a.common.layers)?;
    let cfg = ProbeConfig {
        c: a.c,
        standardize: !a.no_standardize,
        scheme: match a.scheme {
            SchemeArg::Loo => Scheme::Loo,
            SchemeArg::Kfold => Scheme::KFold { k: a.folds, seed: a.common.seed },
        },
        seed: a.common.seed,
    };
    let words: Vec<String> = if a.words.is_empty() {
        store.manifest().words.iter().map(|w| w.key()).collect()
    } else {
        a.words.clone()
    };
    let mut rows = Vec::new();
    for &l in &layers {
        for w in &words {
            let v = neurons::ssi(&store, w, l, site)?;
            let c = neurons::classify(&v, &Thresholds::default());
            let groups = probe::standard_groups(&v, &c, a.common.seed);
            for kind in [TaskKind::Sense, TaskKind::Form] {
                for mut r in probe::probe_word(&store, w, l, site, &groups, kind, &cfg)? {
                    r.word = format!("{w}@{l}");
                    rows.push(r);
                }
            }
        }
    }
    write(&a.common.out, "probe.csv", &probe::accuracy_csv(&rows)?)?;
    #[derive(Serialize)]
    struct Mean {
        group: String,
        task: TaskKind,
        mean_accuracy: f64,
        n_words: usize,
    }
    let mut acc: BTreeMap<(String, TaskKind), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        acc.entry((r.group.clone(), r.task)).or_default().push(r.accuracy);
    }
    #[derive(Serialize)]
    struct Out {
        config: ProbeConfig,
        features_standardized: bool,
        means: Vec<Mean>,
        rows: Vec<probe::AccuracyRow>,
    }
    let means = acc
        .into_iter()
        .map(|((group, task), v)| Mean { group, task, mean_accuracy: v.iter().sum::<f64>() / v.len() as f64, n_words: v.len() })
        .collect();
    let r = Report::new("probe", a, Some(hash), Out { features_standardized: cfg.standardize, config: cfg, means, rows })?;
    write_report(&a.common.out, "probe.json", &r)?;
    Ok(())
}

fn cmd_plan(a: &PlanArgs) -> CmdResult {
    let (store, hash) = open(&a.common.store)?;
    let site = &a.common.site;
    let layers = layers_for(&store, site, &a.common.layers)?;
    let t = Thresholds { selective: a.theta_selective, blind: a.theta_blind };
    let mut parts = Vec::new();
    for &l in &layers {
        let v = neurons::ssi(&store, &a.word, l, site)?;
        let c = neurons::classify(&v, &t);
        parts.push((v, c));
    }
    let sel: Vec<LayerSelection<'_>> = parts.iter().map(|(v, c)| LayerSelection { ssi: v, class: c }).collect();
    let plan = intervene::make_plan(&a.word, site, &sel, a.common.seed)?;
    let means = intervene::compute_group_means(&store, &layers, site)?;
    intervene::write_plan(&a.common.out, &plan, &means)?;
    println!("{}", a.common.out.join(intervene::PLAN_FILE).display());
    let warnings = plan.excluded_layers.iter().map(|e| format!("layer {} excluded: {}", e.layer, e.reason)).collect();
    let r = Report::new("plan-ablation", a, Some(hash), &plan)?.with_warnings(warnings);
    write_report(&a.common.out, "plan_report.json", &r)?;
    Ok(())
}

fn cmd_analyze(a: &AnalyzeArgs) -> CmdResult {
    let bundle = intervene::read_outcomes(&a.outcomes)?;
    let diag = match &a.diagnostic {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| LexError::io(p, e))?;
            Some(serde_json::from_slice::<intervene::DiagnosticTokens>(&bytes).map_err(|e| LexError::format(p.display().to_string(), e.to_string()))?)
        }
        None => None,
    };
    let rep = intervene::analyze_outcomes(&bundle, diag.as_ref())?;
    let mut warnings = Vec::new();
    if bundle.meta.kind == intervene::OutcomeKind::DiagnosticLogProbs {
        warnings.push("outputs are diagnostic log-probabilities only; KL is not computed".into());
    }
    if diag.is_none() && bundle.meta.diagnostic.is_none() {
        warnings.push("no diagnostic tokens; sense accuracy is not computed".into());
    }
    let r = Report::new("analyze-ablation", a, None, &rep)?.with_warnings(warnings);
    write_report(&a.out, "intervention_report.json", &r)?;
    Ok(())
}

fn cmd_sae(a: &SaeArgs) -> CmdResult {
    let (store, hash) = open(&a.store)?;
    let layers = layers_for(&store, SITE_SAE, &a.layers)?;
    let t = CollisionThresholds { firing_rate_min: a.firing_rate_min, blind_d_max: a.blind_d_max };
    let rep = saecollide::collision_report(&store, &layers, &t)?;
    write(&a.out, "sae_collision.csv", &saecollide::collision_csv(&rep)?)?;
    write_report(&a.out, "sae_collision.json", &Report::new("sae-collision", a, Some(hash), &rep)?)?;
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    if a.sae {
        let mut cfg = match &a.config {
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| LexError::io(p, e))?;
                serde_json::from_slice::<SaeSynthConfig>(&bytes).map_err(|e| LexError::format(p.display().to_string(), e.to_string()))?
            }
            None => SaeSynthConfig::default(),
        };
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        let (store, truth) = synth::generate_sae(&cfg)?;
        store.write_to(&a.out)?;
        let mut bytes = serde_json::to_vec_pretty(&truth).map_err(LexError::from)?;
        bytes.push(b'\n');
        write(&a.out, "sae_truth.json", &bytes)?;
        return Ok(());
    }
    let mut cfg = match &a.config {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| LexError::io(p, e))?;
            serde_json::from_slice::<SynthConfig>(&bytes).map_err(|e| LexError::format(p.display().to_string(), e.to_string()))?
        }
        None => SynthConfig::preset(&a.preset)?,
    };
    if let Some(rho) = a.rho {
        let (l, s) = synth::strengths_for_rho(rho);
        cfg.lexical_strength = l;
        cfg.semantic_strength = s;
        cfg.layer_strengths = None;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (store, truth) = synth::generate(&cfg)?;
    store.write_to(&a.out)?;
    write(&a.out, synth::GROUND_TRUTH_FILE, &truth.to_json_bytes())?;
    Ok(())
}

fn cmd_oracle(a: &OracleArgs) -> CmdResult {
    let (store, _) = open(&a.store)?;
    let tp = a.truth.clone().unwrap_or_else(|| a.store.join(synth::GROUND_TRUTH_FILE));
    let bytes = std::fs::read(&tp).map_err(|e| LexError::io(&tp, e))?;
    let truth = GroundTruth::parse(&tp.display().to_string(), &bytes)?;
    let cfg = OracleConfig { top_k: a.k, ..OracleConfig::default() };
    let card = oracle::oracle_check(&store, &truth, &cfg)?;
    for c in &card.checks {
        println!("{} {} = {} ({})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.bound);
    }
    let r = Report::new("oracle-check", a, Some(card.store_hash.clone()), &card)?;
    write_report(&a.out, "oracle_check.json", &r)?;
    if !card.pass {
        let failed = card.checks.iter().filter(|c| !c.pass).count();
        return Err(Failure::Checks(format!("{failed} oracle checks failed")));
    }
    Ok(())
}
