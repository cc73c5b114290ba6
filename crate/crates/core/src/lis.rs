// SPDX-License-Identifier: MIT OR Apache-2.0

//! Lexical identity subspace: principal directions of word-minus-synonym
//! mean differences, their removal from activations, and the resulting
//! dose-response of the PS-SYN gap.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LexError, Result};
use crate::overlap::{self, Metric};
use crate::pairing::{self, Condition, PairSet};
use crate::store::lexa;
use crate::store::manifest::LinkSource;
use crate::store::{ActivationStore, Matrix};
use crate::{decompose, stats};

/// Relative eigenvalue floor below which a direction counts as rank-deficient.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceVectors {
    pub layer: usize,
    pub site: String,
    pub source: LinkSource,
    pub words: Vec<String>,
    /// `words.len()` x d.
    pub rows: DMatrix<f64>,
}

fn mean_row(m: &Matrix, ids: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    for &i in ids {
        for (a, &x) in acc.iter_mut().zip(m.row(i)) {
            *a += x as f64;
        }
    }
    acc.iter_mut().for_each(|a| *a /= ids.len() as f64);
    acc
}

/// One row per synonym-covered word with links of `source`: the mean over
/// all of the word's own sentences (both senses) minus the mean over its
/// synonym sentences.
pub fn difference_vectors(store: &ActivationStore, layer: usize, site: &str, source: LinkSource) -> Result<DifferenceVectors> {
    let m = store.matrix(site, layer)?;
    let covered: Vec<_> = store
        .manifest()
        .words
        .iter()
        .filter(|w| w.link_source == source && pairing::has_syn_coverage(w))
        .collect();
    if covered.is_empty() {
        return Err(LexError::NoSynonymCoverage(format!(
            "no word has synonym coverage with source {source:?}"
        )));
    }
    let d = m.cols();
    let mut rows = DMatrix::zeros(covered.len(), d);
    for (r, w) in covered.iter().enumerate() {
        let own = mean_row(&m, &w.own_sentence_ids());
        let syn = mean_row(&m, &w.synonym_sentence_ids());
        for j in 0..d {
            rows[(r, j)] = own[j] - syn[j];
        }
    }
    Ok(DifferenceVectors {
        layer,
        site: site.to_string(),
        source,
        words: covered.iter().map(|w| w.key()).collect(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LisModel {
    pub layer: usize,
    pub site: String,
    /// k rows of length d, orthonormal.
    pub components: Vec<Vec<f64>>,
    /// Sample variance along each component.
    pub explained_variance: Vec<f64>,
    /// Share of the total centered variance per component.
    pub explained_variance_ratio: Vec<f64>,
    pub n_words: usize,
    pub source: LinkSource,
    pub words: Vec<String>,
}

impl LisModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, Vec::len)
    }

    /// First `k` components (PCA directions are nested).
    pub fn truncate(&self, k: usize) -> LisModel {
        let k = k.min(self.k());
        LisModel {
            components: self.components[..k].to_vec(),
            explained_variance: self.explained_variance[..k].to_vec(),
            explained_variance_ratio: self.explained_variance_ratio[..k].to_vec(),
            ..self.clone()
        }
    }

    /// Model with given orthonormal rows, for planted or external bases.
    pub fn from_basis(layer: usize, site: &str, rows: Vec<Vec<f64>>) -> LisModel {
        let k = rows.len();
        LisModel {
            layer,
            site: site.to_string(),
            components: rows,
            explained_variance: vec![0.0; k],
            explained_variance_ratio: vec![0.0; k],
            n_words: 0,
            source: LinkSource::Wordnet,
            words: Vec::new(),
        }
    }
}

fn normalize_sign(v: &mut [f64]) {
    let scale = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-9 * scale) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Mean-centered PCA of the difference rows. Each component's first nonzero
/// coordinate is positive.
pub fn fit_lis(dv: &DifferenceVectors, k: usize) -> Result<LisModel> {
    let x = &dv.rows;
    let (n, d) = x.shape();
    let mut xc = x.clone();
    for j in 0..d {
        let mu = xc.column(j).mean();
        xc.column_mut(j).add_scalar_mut(-mu);
    }
    // Eigen-decompose whichever of the Gram (n x n) or scatter (d x d)
    // matrices is smaller; both share their nonzero spectrum.
    let via_gram = n <= d;
    let eig = SymmetricEigen::new(if via_gram { &xc * xc.transpose() } else { xc.transpose() * &xc });
    let m = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = order.first().map_or(0.0, |&i| eig.eigenvalues[i].max(0.0));
    let rank = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > RANK_TOL * top.max(f64::MIN_POSITIVE) && eig.eigenvalues[i] > 0.0)
        .count()
        .min(d);
    if k > rank {
        return Err(LexError::Rank {
            requested: k,
            achievable: rank,
        });
    }
    let total: f64 = (0..m).map(|i| eig.eigenvalues[i].max(0.0)).sum();
    let denom = (n.max(2) - 1) as f64;
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut variance = Vec::with_capacity(k);
    let mut ratio = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let lambda = eig.eigenvalues[i];
        let u = eig.eigenvectors.column(i);
        let mut v: Vec<f64> = if via_gram {
            (xc.transpose() * u).iter().copied().collect()
        } else {
            u.iter().copied().collect()
        };
        // Re-orthogonalize against earlier components to absorb round-off.
        for c in &components {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        normalize_sign(&mut v);
        components.push(v);
        variance.push(lambda / denom);
        ratio.push(if total > 0.0 { lambda / total } else { 0.0 });
    }
    Ok(LisModel {
        layer: dv.layer,
        site: dv.site.clone(),
        components,
        explained_variance: variance,
        explained_variance_ratio: ratio,
        n_words: n,
        source: dv.source,
        words: dv.words.clone(),
    })
}

fn project_row(row: &mut [f64], comps: &[Vec<f64>]) {
    for c in comps {
        let p: f64 = row.iter().zip(c).map(|(a, b)| a * b).sum();
        row.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
    }
}

fn check_dim(d: usize, lis: &LisModel) -> Result<()> {
    if lis.k() > 0 && lis.dim() != d {
        return Err(LexError::DimensionMismatch(format!(
            "LIS has dimension {}, activations have {d}",
            lis.dim()
        )));
    }
    Ok(())
}

/// `x - sum_r (x . c_r) c_r` for every row, computed in f64.
pub fn project_out(m: &Matrix, lis: &LisModel) -> Result<Matrix> {
    check_dim(m.cols(), lis)?;
    let mut out = m.clone();
    if lis.k() == 0 {
        return Ok(out);
    }
    let d = m.cols();
    out.as_mut_slice().par_chunks_mut(d.max(1)).for_each(|row| {
        let mut r: Vec<f64> = row.iter().map(|&x| x as f64).collect();
        project_row(&mut r, &lis.components);
        for (o, v) in row.iter_mut().zip(r) {
            *o = v as f32;
        }
    });
    Ok(out)
}

/// Projection of f64 rows.
pub fn project_out_f64(m: &DMatrix<f64>, lis: &LisModel) -> Result<DMatrix<f64>> {
    check_dim(m.ncols(), lis)?;
    let mut out = m.clone();
    for i in 0..m.nrows() {
        let mut r: Vec<f64> = out.row(i).iter().copied().collect();
        project_row(&mut r, &lis.components);
        for (j, v) in r.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

/// Mean squared singular value of `A B^T`: `||A B^T||_F^2 / min(k_a, k_b)`.
/// For independent random subspaces its expectation is `max(k_a, k_b) / d`.
pub fn subspace_overlap(a: &LisModel, b: &LisModel) -> Result<f64> {
    if a.dim() != b.dim() && a.k() > 0 && b.k() > 0 {
        return Err(LexError::DimensionMismatch(format!(
            "subspaces of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let kmin = a.k().min(b.k());
    if kmin == 0 {
        return Err(LexError::Undefined("overlap with an empty subspace".into()));
    }
    let mut fro = 0.0;
    for x in &a.components {
        for y in &b.components {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            fro += dot * dot;
        }
    }
    Ok((fro / kmin as f64).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseRow {
    pub k: usize,
    pub ps_minus_syn: f64,
    pub r_lex: Option<f64>,
    pub delta_ps: f64,
    pub delta_syn: f64,
    /// `1 - gap_k / gap_0`.
    pub gap_reduction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseResponse {
    pub site: String,
    pub metric: Metric,
    pub layers: Vec<usize>,
    pub rows: Vec<DoseRow>,
}

/// For each k, remove the top-k LIS directions of each layer from all of
/// that layer's activations and recompute the layer-averaged condition means.
pub fn dose_response(
    store: &ActivationStore,
    pairs: &PairSet,
    layers: &[usize],
    ks: &[usize],
    site: &str,
    metric: Metric,
    source: LinkSource,
) -> Result<DoseResponse> {
    if layers.is_empty() || ks.is_empty() {
        return Err(LexError::InvalidInput("dose-response needs layers and k values".into()));
    }
    let kmax = *ks.iter().max().unwrap();
    // (layer, k) -> (PS, SYN, SL, CL)
    let per_layer: Vec<Vec<[f64; 4]>> = layers
        .par_iter()
        .map(|&layer| {
            let m = store.matrix(site, layer)?;
            let model = if kmax > 0 {
                Some(fit_lis(&difference_vectors(store, layer, site, source)?, kmax)?)
            } else {
                None
            };
            ks.iter()
                .map(|&k| {
                    let projected;
                    let used: &Matrix = match (&model, k) {
                        (Some(model), k) if k > 0 => {
                            projected = project_out(&m, &model.truncate(k))?;
                            &projected
                        }
                        _ => &m,
                    };
                    let s = overlap::summarize_matrix(used, pairs, layer, site, None)?;
                    let get = |c: Condition| {
                        s.mean(c, metric).ok_or_else(|| {
                            LexError::InvalidInput(format!("layer {layer}: no {c} {metric} values"))
                        })
                    };
                    Ok([get(Condition::PS)?, get(Condition::SYN)?, get(Condition::SL)?, get(Condition::CL)?])
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let avg = |ki: usize, c: usize| stats::mean(&per_layer.iter().map(|l| l[ki][c]).collect::<Vec<_>>());
    let base = ks.iter().position(|&k| k == 0);
    let (ps0, syn0) = match base {
        Some(b) => (avg(b, 0), avg(b, 1)),
        None => {
            let mut ps = Vec::new();
            let mut syn = Vec::new();
            for &layer in layers {
                let s = overlap::condition_summary(store, pairs, layer, site, None)?;
                ps.push(s.mean(Condition::PS, metric).unwrap_or(f64::NAN));
                syn.push(s.mean(Condition::SYN, metric).unwrap_or(f64::NAN));
            }
            (stats::mean(&ps), stats::mean(&syn))
        }
    };
    let gap0 = ps0 - syn0;
    let rows = ks
        .iter()
        .enumerate()
        .map(|(ki, &k)| {
            let (ps, syn) = (avg(ki, 0), avg(ki, 1));
            let r: Vec<f64> = per_layer
                .iter()
                .filter_map(|l| decompose::r_lex(l[ki][2], l[ki][0], l[ki][1], l[ki][3]).ok())
                .collect();
            DoseRow {
                k,
                ps_minus_syn: ps - syn,
                r_lex: (r.len() == per_layer.len()).then(|| stats::mean(&r)),
                delta_ps: ps - ps0,
                delta_syn: syn - syn0,
                gap_reduction: (gap0 != 0.0).then(|| 1.0 - (ps - syn) / gap0),
            }
        })
        .collect();
    Ok(DoseResponse {
        site: site.to_string(),
        metric,
        layers: layers.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LisSidecar {
    layer: usize,
    site: String,
    k: usize,
    d: usize,
    explained_variance: Vec<f64>,
    explained_variance_ratio: Vec<f64>,
    n_words: usize,
    source: LinkSource,
    words: Vec<String>,
}

/// Write `<stem>.lexa` (components, k x d) and `<stem>.json` (metadata).
pub fn write_lis(lis: &LisModel, dir: &Path, stem: &str) -> Result<()> {
    let d = lis.dim();
    let rows: Vec<Vec<f32>> = lis.components.iter().map(|r| r.iter().map(|&x| x as f32).collect()).collect();
    let m = Matrix::from_rows(d, &rows)?;
    std::fs::create_dir_all(dir).map_err(|e| LexError::io(dir, e))?;
    lexa::write_file(&dir.join(format!("{stem}.lexa")), &m)?;
    let side = LisSidecar {
        layer: lis.layer,
        site: lis.site.clone(),
        k: lis.k(),
        d,
        explained_variance: lis.explained_variance.clone(),
        explained_variance_ratio: lis.explained_variance_ratio.clone(),
        n_words: lis.n_words,
        source: lis.source,
        words: lis.words.clone(),
    };
    let path = dir.join(format!("{stem}.json"));
    let mut bytes = serde_json::to_vec_pretty(&side)?;
    bytes.push(b'\n');
    std::fs::write(&path, bytes).map_err(|e| LexError::io(&path, e))
}

pub fn read_lis(dir: &Path, stem: &str) -> Result<LisModel> {
    let path = dir.join(format!("{stem}.json"));
    let bytes = std::fs::read(&path).map_err(|e| LexError::io(&path, e))?;
    let side: LisSidecar = serde_json::from_slice(&bytes)
        .map_err(|e| LexError::format(path.display().to_string(), e.to_string()))?;
    let m = lexa::read_file(&dir.join(format!("{stem}.lexa")))?;
    if m.rows() != side.k || m.cols() != side.d {
        return Err(LexError::DimensionMismatch(format!(
            "LIS sidecar says {}x{}, matrix is {}x{}",
            side.k,
            side.d,
            m.rows(),
            m.cols()
        )));
    }
    Ok(LisModel {
        layer: side.layer,
        site: side.site,
        components: m.iter_rows().map(|r| r.iter().map(|&x| x as f64).collect()).collect(),
        explained_variance: side.explained_variance,
        explained_variance_ratio: side.explained_variance_ratio,
        n_words: side.n_words,
        source: side.source,
        words: side.words,
    })
}
