//! Token n-gram vectors, cosine similarity and agglomerative clustering of
//! code samples.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::telemetry::VisitRecord;

pub const DEFAULT_NGRAM: usize = 3;
pub const MAX_NGRAM: usize = 8;
pub const DEFAULT_CUT_SIMILARITY: f64 = 0.7;

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("n must be in 1..={MAX_NGRAM}, got {0}")]
    BadN(usize),
    #[error("cannot compare a {0}-gram vector with a {1}-gram vector")]
    NMismatch(usize, usize),
    #[error("cut similarity must be in [0, 1], got {0}")]
    BadCut(f64),
    #[error("no samples")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NGramVector {
    pub n: usize,
    pub counts: HashMap<Vec<String>, u32>,
}

impl NGramVector {
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().map(|&c| u64::from(c)).sum()
    }

    fn norm(&self) -> f64 {
        self.counts.values().map(|&c| f64::from(c).powi(2)).sum::<f64>().sqrt()
    }
}

pub fn vectorize(code: &str, n: usize) -> Result<NGramVector, SimilarityError> {
    if !(1..=MAX_NGRAM).contains(&n) {
        return Err(SimilarityError::BadN(n));
    }
    let tokens: Vec<&str> = code.split_whitespace().collect();
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        let key: Vec<String> = w.iter().map(|t| (*t).to_owned()).collect();
        *counts.entry(key).or_insert(0) += 1;
    }
    Ok(NGramVector { n, counts })
}

/// `dot / (|u| |v|)`, 0 when either side is empty.
pub fn cosine(u: &NGramVector, v: &NGramVector) -> Result<f64, SimilarityError> {
    if u.n != v.n {
        return Err(SimilarityError::NMismatch(u.n, v.n));
    }
    if u.is_empty() || v.is_empty() {
        return Ok(0.0);
    }
    let (small, large) = if u.counts.len() <= v.counts.len() { (u, v) } else { (v, u) };
    let dot: f64 = small
        .counts
        .iter()
        .filter_map(|(k, &a)| large.counts.get(k).map(|&b| f64::from(a) * f64::from(b)))
        .sum();
    Ok((dot / (u.norm() * v.norm())).clamp(0.0, 1.0))
}

/// Renders Wasm function bodies as one hex token per byte.
pub fn wasm_hex_document(bodies: &[Vec<u8>]) -> String {
    bodies
        .iter()
        .map(|b| b.iter().map(|x| format!("{x:02x}")).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One sample per record: the retained sources of its scripts.
pub fn js_samples(records: &[VisitRecord]) -> Vec<(String, String)> {
    records
        .iter()
        .filter_map(|r| {
            let doc: Vec<&str> = r.scripts.iter().filter_map(|s| s.source.as_deref()).collect();
            (!doc.is_empty()).then(|| (r.site.clone(), doc.join("\n")))
        })
        .collect()
}

/// One sample per record that carries Wasm.
pub fn wasm_samples(records: &[VisitRecord]) -> Vec<(String, String)> {
    records
        .iter()
        .filter(|r| !r.wasm_modules.is_empty())
        .map(|r| {
            let bodies: Vec<Vec<u8>> = r
                .wasm_modules
                .iter()
                .flat_map(|m| m.function_bodies.iter().cloned())
                .collect();
            (r.site.clone(), wasm_hex_document(&bodies))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    Single,
    Complete,
    #[default]
    Average,
}

impl std::str::FromStr for Linkage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "single" => Ok(Linkage::Single),
            "complete" => Ok(Linkage::Complete),
            "average" => Ok(Linkage::Average),
            other => Err(format!("unknown linkage {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Cluster id per sample, dense from 0 in order of first appearance.
    pub assignments: Vec<usize>,
    /// Leaf order of the dendrogram.
    pub order: Vec<usize>,
    pub linkage: Linkage,
    pub cut_similarity: f64,
}

impl ClusterResult {
    pub fn cluster_count(&self) -> usize {
        self.assignments.iter().max().map_or(0, |m| m + 1)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.cluster_count()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Clusters with at least two members.
    pub fn major_clusters(&self) -> usize {
        self.cluster_sizes().iter().filter(|&&s| s >= 2).count()
    }
}

/// Pairwise cosine matrix in input order.
pub fn pairwise(samples: &[NGramVector]) -> Result<Vec<Vec<f64>>, SimilarityError> {
    if let Some(first) = samples.first() {
        if let Some(bad) = samples.iter().find(|s| s.n != first.n) {
            return Err(SimilarityError::NMismatch(first.n, bad.n));
        }
    }
    let n = samples.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| match j.cmp(&i) {
                    std::cmp::Ordering::Equal => 1.0,
                    _ => cosine(&samples[i], &samples[j]).unwrap_or(0.0),
                })
                .collect()
        })
        .collect();
    // enforce exact symmetry
    let mut m = rows;
    for i in 0..n {
        for j in 0..i {
            m[i][j] = m[j][i];
        }
    }
    Ok(m)
}

pub fn cluster(samples: &[NGramVector], cut_similarity: f64) -> Result<ClusterResult, SimilarityError> {
    cluster_with(samples, cut_similarity, Linkage::Average)
}

/// Agglomerative clustering: repeatedly merges the most similar pair of
/// clusters until the best similarity drops below `cut_similarity`. Ties go
/// to the lowest `(i, j)` slot pair; a merged cluster keeps the lower slot.
pub fn cluster_with(
    samples: &[NGramVector],
    cut_similarity: f64,
    linkage: Linkage,
) -> Result<ClusterResult, SimilarityError> {
    if !(0.0..=1.0).contains(&cut_similarity) {
        return Err(SimilarityError::BadCut(cut_similarity));
    }
    if samples.is_empty() {
        return Err(SimilarityError::Empty);
    }
    let mut sim = pairwise(samples)?;
    Ok(agglomerate(&mut sim, cut_similarity, linkage))
}

fn agglomerate(sim: &mut [Vec<f64>], cut: f64, linkage: Linkage) -> ClusterResult {
    let n = sim.len();
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if members[i].is_none() {
                continue;
            }
            for j in i + 1..n {
                if members[j].is_none() {
                    continue;
                }
                if best.is_none_or(|(_, _, s)| sim[i][j] > s) {
                    best = Some((i, j, sim[i][j]));
                }
            }
        }
        let Some((i, j, s)) = best else { break };
        if s < cut {
            break;
        }
        let mj = members[j].take().unwrap_or_default();
        let (ni, nj) = (members[i].as_ref().map_or(0, Vec::len) as f64, mj.len() as f64);
        for k in 0..n {
            if k == i || members[k].is_none() {
                continue;
            }
            let merged = match linkage {
                Linkage::Average => (ni * sim[i][k] + nj * sim[j][k]) / (ni + nj),
                Linkage::Single => sim[i][k].max(sim[j][k]),
                Linkage::Complete => sim[i][k].min(sim[j][k]),
            };
            sim[i][k] = merged;
            sim[k][i] = merged;
        }
        if let Some(mi) = members[i].as_mut() {
            mi.extend(mj);
        }
    }

    let mut slot_of = vec![0; n];
    let mut order = Vec::with_capacity(n);
    for (slot, m) in members.iter().enumerate() {
        if let Some(m) = m {
            for &s in m {
                slot_of[s] = slot;
            }
            order.extend(m.iter().copied());
        }
    }
    let mut dense: HashMap<usize, usize> = HashMap::new();
    let assignments = slot_of
        .iter()
        .map(|slot| {
            let next = dense.len();
            *dense.entry(*slot).or_insert(next)
        })
        .collect();
    ClusterResult {
        assignments,
        order,
        linkage,
        cut_similarity: cut,
    }
}

/// Similarity matrix with rows and columns permuted into dendrogram order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub order: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

pub fn similarity_matrix(samples: &[NGramVector]) -> Result<SimilarityMatrix, SimilarityError> {
    similarity_matrix_with(samples, DEFAULT_CUT_SIMILARITY, Linkage::Average)
}

pub fn similarity_matrix_with(
    samples: &[NGramVector],
    cut: f64,
    linkage: Linkage,
) -> Result<SimilarityMatrix, SimilarityError> {
    if samples.is_empty() {
        return Err(SimilarityError::Empty);
    }
    let sim = pairwise(samples)?;
    let order = agglomerate(&mut sim.clone(), cut, linkage).order;
    let values = order
        .iter()
        .map(|&i| order.iter().map(|&j| sim[i][j]).collect())
        .collect();
    Ok(SimilarityMatrix { order, values })
}

pub fn write_matrix_csv<W: Write>(w: W, ids: &[String], m: &SimilarityMatrix) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![String::new()];
    header.extend(m.order.iter().map(|&i| ids[i].clone()));
    out.write_record(&header)?;
    for (row, &i) in m.values.iter().zip(&m.order) {
        let mut rec = vec![ids[i].clone()];
        rec.extend(row.iter().map(|v| format!("{v:.6}")));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_clusters_csv<W: Write>(w: W, ids: &[String], r: &ClusterResult) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sample_id", "cluster_id"])?;
    for (id, c) in ids.iter().zip(&r.assignments) {
        out.write_record([id.as_str(), &c.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
