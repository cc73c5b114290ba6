// SPDX-License-Identifier: MIT OR Apache-2.0

//! L2-regularized logistic-regression probes and cross-validation over
//! neuron groups.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LexError, Result};
use crate::neurons::{NeuronClassification, SsiVector};
use crate::rng;
use crate::store::manifest::{SenseLabel, WordEntry};
use crate::store::{ActivationStore, Matrix};

pub const DEFAULT_C: f64 = 0.01;
pub const MAX_ITERATIONS: usize = 500;
pub const GRAD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTask {
    /// n x p design matrix.
    pub x: DMatrix<f64>,
    pub y: Vec<bool>,
    /// Inverse regularization strength; the penalty is `||w||^2 / (2C)`.
    pub c: f64,
    pub standardize: bool,
}

impl ProbeTask {
    pub fn new(x: DMatrix<f64>, y: Vec<bool>) -> Self {
        ProbeTask {
            x,
            y,
            c: DEFAULT_C,
            standardize: true,
        }
    }

    fn check(&self) -> Result<()> {
        if self.x.nrows() != self.y.len() {
            return Err(LexError::DimensionMismatch(format!(
                "{} rows but {} labels",
                self.x.nrows(),
                self.y.len()
            )));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(LexError::InvalidInput(format!("C must be positive (got {})", self.c)));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(LexError::InvalidInput("probe features must be finite".into()));
        }
        Ok(())
    }

    fn subset(&self, rows: &[usize]) -> ProbeTask {
        ProbeTask {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            c: self.c,
            standardize: self.standardize,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRegModel {
    /// Weights on the raw (unstandardized) features.
    pub weights: DVector<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Objective value after each accepted step, starting at the initial point.
    pub trace: Vec<f64>,
}

impl LogRegModel {
    pub fn decision(&self, row: &[f64]) -> f64 {
        self.weights.iter().zip(row).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<bool> {
        (0..x.nrows())
            .map(|i| {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                self.decision(&row) > 0.0
            })
            .collect()
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `sum_i log(1 + exp(-s_i (x_i . w + b))) + ||w||^2 / (2C)` with `s_i = +-1`.
pub fn objective(x: &DMatrix<f64>, y: &[bool], w: &DVector<f64>, b: f64, c: f64) -> f64 {
    let z = x * w;
    let nll: f64 = z
        .iter()
        .zip(y)
        .map(|(&zi, &yi)| softplus(if yi { -(zi + b) } else { zi + b }))
        .sum();
    nll + w.norm_squared() / (2.0 * c)
}

/// Gradient of [`objective`] with respect to `(w, b)`.
pub fn gradient(x: &DMatrix<f64>, y: &[bool], w: &DVector<f64>, b: f64, c: f64) -> (DVector<f64>, f64) {
    let z = x * w;
    let r = DVector::from_iterator(
        y.len(),
        z.iter().zip(y).map(|(&zi, &yi)| sigmoid(zi + b) - if yi { 1.0 } else { 0.0 }),
    );
    (x.transpose() * &r + w / c, r.sum())
}

fn inf_norm(g: &DVector<f64>, gb: f64) -> f64 {
    g.iter().fold(gb.abs(), |a, v| a.max(v.abs()))
}

/// Column means and standard deviations (zero-variance columns get sd 1 and
/// are zeroed out by the transform).
fn column_scaling(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let n = x.nrows() as f64;
    let mut means = Vec::with_capacity(x.ncols());
    let mut sds = Vec::with_capacity(x.ncols());
    let mut live = Vec::with_capacity(x.ncols());
    for col in x.column_iter() {
        let mu = col.sum() / n;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let sd = var.sqrt();
        let ok = sd > 1e-12 * (1.0 + mu.abs());
        means.push(mu);
        sds.push(if ok { sd } else { 1.0 });
        live.push(ok);
    }
    (means, sds, live)
}

/// Newton direction from the full (p+1) x (p+1) Hessian
/// `[X^T S X + I/C, X^T S 1; 1^T S X, 1^T S 1]`.
fn primal_step(x: &DMatrix<f64>, s: &[f64], rhs: &DVector<f64>, c: f64) -> DVector<f64> {
    let p = x.ncols();
    let mut a = DMatrix::zeros(x.nrows(), p + 1);
    for i in 0..x.nrows() {
        let r = s[i].sqrt();
        for j in 0..p {
            a[(i, j)] = r * x[(i, j)];
        }
        a[(i, p)] = r;
    }
    let mut h = a.transpose() * &a;
    for j in 0..p {
        h[(j, j)] += 1.0 / c;
    }
    match h.clone().cholesky() {
        Some(ch) => ch.solve(rhs),
        None => h.lu().solve(rhs).unwrap_or_else(|| rhs.clone()),
    }
}

/// The same direction via Woodbury on `M = X^T S X + I/C` and a Schur
/// complement for the unpenalized bias. `k = X X^T`.
fn dual_step(x: &DMatrix<f64>, k: &DMatrix<f64>, s: &[f64], g: &DVector<f64>, gb: f64, c: f64) -> DVector<f64> {
    let n = x.nrows();
    let p = x.ncols();
    let lam = 1.0 / c;
    let r: Vec<f64> = s.iter().map(|v| v.sqrt()).collect();
    let inner = DMatrix::from_fn(n, n, |i, j| r[i] * k[(i, j)] * r[j] + if i == j { lam } else { 0.0 });
    let ch = inner.cholesky().expect("lambda I + B B^T is positive definite");
    // M^-1 v = (v - B^T (lam I + B B^T)^-1 B v) / lam with B = S^1/2 X.
    let solve_m = |v: &DVector<f64>| -> DVector<f64> {
        let xv = x * v;
        let bv = DVector::from_fn(n, |i, _| r[i] * xv[i]);
        let t = ch.solve(&bv);
        let rt = DVector::from_fn(n, |i, _| r[i] * t[i]);
        (v - x.transpose() * rt) / lam
    };
    let u = x.transpose() * DVector::from_column_slice(s);
    let ssum: f64 = s.iter().sum();
    let mg = solve_m(g);
    let mu = solve_m(&u);
    let denom = ssum - u.dot(&mu);
    let db = if denom > 1e-300 { (gb - u.dot(&mg)) / denom } else { 0.0 };
    let dw = mg - mu * db;
    let mut out = DVector::zeros(p + 1);
    out.rows_mut(0, p).copy_from(&dw);
    out[p] = db;
    out
}

fn newton(x: &DMatrix<f64>, y: &[bool], c: f64) -> Result<(DVector<f64>, f64, usize, f64, Vec<f64>)> {
    let p = x.ncols();
    let mut w = DVector::zeros(p);
    let mut b = 0.0;
    let mut f = objective(x, y, &w, b, c);
    let mut trace = vec![f];
    // With more features than rows the Newton system is solved in the n x n
    // row space.
    let gram = (p > x.nrows()).then(|| x * x.transpose());
    for it in 0..=MAX_ITERATIONS {
        let (g, gb) = gradient(x, y, &w, b, c);
        let gn = inf_norm(&g, gb);
        if gn < GRAD_TOL {
            return Ok((w, b, it, gn, trace));
        }
        if it == MAX_ITERATIONS {
            return Err(LexError::NotConverged {
                iterations: it,
                grad_norm: gn,
            });
        }
        let z = x * &w;
        let s: Vec<f64> = z
            .iter()
            .map(|&zi| {
                let q = sigmoid(zi + b);
                q * (1.0 - q)
            })
            .collect();
        let mut rhs = DVector::zeros(p + 1);
        rhs.rows_mut(0, p).copy_from(&g);
        rhs[p] = gb;
        let step = match &gram {
            Some(k) => dual_step(x, k, &s, &g, gb, c),
            None => primal_step(x, &s, &rhs, c),
        };
        let dir_dot: f64 = step.dot(&rhs);
        let mut t = 1.0;
        loop {
            let w_new = &w - t * step.rows(0, p);
            let b_new = b - t * step[p];
            let f_new = objective(x, y, &w_new, b_new, c);
            // Near the optimum the predicted decrease drops below the
            // objective's rounding, so a full step is taken on trust.
            let tiny = dir_dot <= 1e-12 * (1.0 + f.abs());
            if f_new <= f - 1e-4 * t * dir_dot || (tiny && t == 1.0) || t < 1e-12 {
                if f_new <= f || tiny {
                    w = w_new;
                    b = b_new;
                    f = f_new;
                }
                break;
            }
            t *= 0.5;
        }
        trace.push(f);
    }
    unreachable!("loop returns on convergence or at the iteration cap")
}

/// Fit the probe. With `standardize`, features are z-scored with the task's
/// own statistics and the weights are mapped back to raw feature units.
pub fn train_logreg(task: &ProbeTask) -> Result<LogRegModel> {
    task.check()?;
    let n = task.y.len();
    let pos = task.y.iter().filter(|&&v| v).count();
    if n < 2 || pos == 0 || pos == n {
        return Err(LexError::InvalidInput(format!(
            "logistic regression needs both classes (n = {n}, positives = {pos})"
        )));
    }
    if !task.standardize {
        let (w, b, iterations, grad_norm, trace) = newton(&task.x, &task.y, task.c)?;
        return Ok(LogRegModel { weights: w, bias: b, iterations, grad_norm, trace });
    }
    let (means, sds, live) = column_scaling(&task.x);
    let mut z = task.x.clone();
    for (j, mut col) in z.column_iter_mut().enumerate() {
        for v in col.iter_mut() {
            *v = if live[j] { (*v - means[j]) / sds[j] } else { 0.0 };
        }
    }
    let (wz, bz, iterations, grad_norm, trace) = newton(&z, &task.y, task.c)?;
    let mut weights = DVector::zeros(wz.len());
    let mut bias = bz;
    for j in 0..wz.len() {
        if live[j] {
            weights[j] = wz[j] / sds[j];
            bias -= wz[j] * means[j] / sds[j];
        }
    }
    Ok(LogRegModel { weights, bias, iterations, grad_norm, trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheme {
    Loo,
    KFold { k: usize, seed: u64 },
}

impl Scheme {
    pub fn label(&self) -> String {
        match self {
            Scheme::Loo => "loo".into(),
            Scheme::KFold { k, .. } => format!("{k}-fold"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub accuracy: f64,
    pub n: usize,
    pub n_folds: usize,
    /// Folds whose training part held one class; they predict that class.
    pub single_class_folds: Vec<usize>,
}

/// Held-out fold indices. k-fold is stratified: each class is shuffled with
/// the seed and dealt round-robin, the second class continuing where the
/// first stopped.
pub fn folds(y: &[bool], scheme: Scheme) -> Result<Vec<Vec<usize>>> {
    let n = y.len();
    match scheme {
        Scheme::Loo => {
            if n < 2 {
                return Err(LexError::InvalidInput("LOO needs 2 rows".into()));
            }
            Ok((0..n).map(|i| vec![i]).collect())
        }
        Scheme::KFold { k, seed } => {
            if k < 2 || k > n {
                return Err(LexError::InvalidInput(format!("{k}-fold CV infeasible for {n} rows")));
            }
            let mut rng = rng::stream_rng(seed, rng::named_stream(&["probe", "folds"]));
            let mut out = vec![Vec::new(); k];
            let mut slot = 0;
            for class in [false, true] {
                let mut idx: Vec<usize> = (0..n).filter(|&i| y[i] == class).collect();
                idx.shuffle(&mut rng);
                for i in idx {
                    out[slot % k].push(i);
                    slot += 1;
                }
            }
            for f in out.iter_mut() {
                f.sort_unstable();
            }
            Ok(out)
        }
    }
}

pub fn cross_validate(task: &ProbeTask, scheme: Scheme) -> Result<CvResult> {
    task.check()?;
    let n = task.y.len();
    let held = folds(&task.y, scheme)?;
    let results: Vec<(usize, bool)> = held
        .par_iter()
        .map(|test| {
            let train: Vec<usize> = (0..n).filter(|i| test.binary_search(i).is_err()).collect();
            let sub = task.subset(&train);
            let pos = sub.y.iter().filter(|&&v| v).count();
            let (preds, single) = if pos == 0 || pos == sub.y.len() {
                (vec![pos > 0; test.len()], true)
            } else {
                let model = train_logreg(&sub)?;
                (model.predict(&task.x.select_rows(test)), false)
            };
            let correct = test.iter().zip(preds).filter(|(&i, p)| task.y[i] == *p).count();
            Ok((correct, single))
        })
        .collect::<Result<_>>()?;
    let correct: usize = results.iter().map(|r| r.0).sum();
    Ok(CvResult {
        accuracy: correct as f64 / n as f64,
        n,
        n_folds: held.len(),
        single_class_folds: results.iter().enumerate().filter(|(_, r)| r.1).map(|(i, _)| i).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Sense,
    Form,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Sense => "sense",
            TaskKind::Form => "form",
        }
    }
}

fn design(m: &Matrix, rows: &[usize], neurons: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), neurons.len(), |i, j| m.row(rows[i])[neurons[j]] as f64)
}

/// Rows and labels for one word. Sense: A (true) vs B. Form: the word's own
/// sentences (true) vs an equal-size seeded sample of other words' own
/// sentences.
pub fn task_rows(store: &ActivationStore, word: &WordEntry, kind: TaskKind, seed: u64) -> Result<(Vec<usize>, Vec<bool>)> {
    match kind {
        TaskKind::Sense => {
            let a = word.sentence_ids(SenseLabel::A);
            let b = word.sentence_ids(SenseLabel::B);
            let y = a.iter().map(|_| true).chain(b.iter().map(|_| false)).collect();
            Ok((a.into_iter().chain(b).collect(), y))
        }
        TaskKind::Form => {
            let own = word.own_sentence_ids();
            let key = word.key();
            let others: Vec<usize> = store
                .manifest()
                .words
                .iter()
                .filter(|w| w.key() != key)
                .flat_map(|w| w.own_sentence_ids())
                .collect();
            if others.is_empty() {
                return Err(LexError::InvalidInput("form task needs other words".into()));
            }
            let mut rng = rng::stream_rng(seed, rng::named_stream(&["probe", "form", &key]));
            let pick = rng::sample_sorted(&mut rng, others.len(), own.len());
            let y = own.iter().map(|_| true).chain(pick.iter().map(|_| false)).collect();
            Ok((own.into_iter().chain(pick.into_iter().map(|i| others[i])).collect(), y))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub c: f64,
    pub standardize: bool,
    pub scheme: Scheme,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            c: DEFAULT_C,
            standardize: true,
            scheme: Scheme::Loo,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub word: String,
    pub group: String,
    pub task: TaskKind,
    pub scheme: String,
    pub accuracy: f64,
    pub n: usize,
    pub n_features: usize,
    pub single_class_folds: usize,
}

/// One probe per named group for `word`; empty groups are skipped.
pub fn probe_word(
    store: &ActivationStore,
    word: &str,
    layer: usize,
    site: &str,
    groups: &BTreeMap<String, Vec<usize>>,
    kind: TaskKind,
    cfg: &ProbeConfig,
) -> Result<Vec<AccuracyRow>> {
    let manifest = store.manifest();
    let w = manifest
        .word_index(word)
        .map(|i| &manifest.words[i])
        .ok_or_else(|| LexError::InvalidInput(format!("word {word} not in manifest")))?;
    let m = store.matrix(site, layer)?;
    let (rows, y) = task_rows(store, w, kind, cfg.seed)?;
    groups
        .iter()
        .filter(|(_, n)| !n.is_empty())
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(name, neurons)| {
            if let Some(&bad) = neurons.iter().find(|&&j| j >= m.cols()) {
                return Err(LexError::OutOfRange(format!("group {name}: neuron {bad} >= {}", m.cols())));
            }
            let task = ProbeTask {
                x: design(&m, &rows, neurons),
                y: y.clone(),
                c: cfg.c,
                standardize: cfg.standardize,
            };
            let cv = cross_validate(&task, cfg.scheme)?;
            Ok(AccuracyRow {
                word: word.to_string(),
                group: name.to_string(),
                task: kind,
                scheme: cfg.scheme.label(),
                accuracy: cv.accuracy,
                n: cv.n,
                n_features: neurons.len(),
                single_class_folds: cv.single_class_folds.len(),
            })
        })
        .collect()
}

/// Standard groups from one word's classification: all selective neurons,
/// all blind neurons, a seeded random draw of the blind group's size from
/// the remaining neurons, and the top quartile of neurons by SSI.
pub fn standard_groups(v: &SsiVector, c: &NeuronClassification, seed: u64) -> BTreeMap<String, Vec<usize>> {
    let d = v.values.len();
    let mut used = vec![false; d];
    for &j in c.selective.iter().chain(&c.blind) {
        used[j] = true;
    }
    let rest: Vec<usize> = (0..d).filter(|&j| !used[j]).collect();
    let size = if c.blind.is_empty() { c.selective.len() } else { c.blind.len() };
    let mut rng = rng::stream_rng(seed, rng::named_stream(&["probe", "random", &c.word, &c.layer.to_string()]));
    let random: Vec<usize> = rng::sample_sorted(&mut rng, rest.len(), size)
        .into_iter()
        .map(|i| rest[i])
        .collect();
    let mut by_ssi: Vec<usize> = (0..d).collect();
    by_ssi.sort_by(|&a, &b| v.values[b].total_cmp(&v.values[a]).then(a.cmp(&b)));
    let mut top: Vec<usize> = by_ssi[..d.div_ceil(4)].to_vec();
    top.sort_unstable();
    BTreeMap::from([
        ("selective".to_string(), c.selective.clone()),
        ("blind".to_string(), c.blind.clone()),
        ("random".to_string(), random),
        ("top_quartile_ssi".to_string(), top),
    ])
}

/// `word,group,task,scheme,accuracy,n`.
pub fn accuracy_csv(rows: &[AccuracyRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["word", "group", "task", "scheme", "accuracy", "n"])?;
    for r in rows {
        w.write_record([
            r.word.clone(),
            r.group.clone(),
            r.task.as_str().to_string(),
            r.scheme.clone(),
            format!("{}", r.accuracy),
            r.n.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| LexError::InvalidInput(e.to_string()))
}
