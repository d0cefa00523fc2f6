//! Graph label spreading of yes/no attention labels.
//!
//! With affinities `W_ij = exp(-|x_i - x_j|^2 / (2 sigma^2))`, `W_ii = 0`, and
//! `S = D^-1/2 W D^-1/2`, the iteration `F <- alpha S F + (1 - alpha) Y`
//! starting at `F = Y` converges to `(1 - alpha)(I - alpha S)^-1 Y`. `Y` has
//! one column per answer and a one-hot row for each labeled instance.
//!
//! Up to [`SpreadConfig::dense_limit`] points the affinity graph is complete
//! and stored as a packed upper triangle. Larger inputs keep only the
//! [`SpreadConfig::sparse_neighbors`] nearest neighbors of every point,
//! symmetrized by union.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::embed::Embedding;
use crate::linalg::{dist, nearest_rows, sq_dist, Matrix};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionValue {
    Correct,
    Incorrect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Human,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionLabel {
    pub id: String,
    pub value: AttentionValue,
    pub source: LabelSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionScore {
    pub id: String,
    pub p_correct: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance over an evenly strided subsample.
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadConfig {
    pub alpha: f64,
    pub bandwidth: Bandwidth,
    /// Iteration stops once `alpha / (1 - alpha) * |F_t - F_{t-1}|_F < tol`,
    /// which bounds the Frobenius distance to the fixed point by `tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub dense_limit: usize,
    pub sparse_neighbors: usize,
    /// Subsample size for [`Bandwidth::Auto`].
    pub bandwidth_sample: usize,
}

impl Default for SpreadConfig {
    fn default() -> Self {
        Self {
            alpha: 0.99,
            bandwidth: Bandwidth::Auto,
            tol: 1e-6,
            max_iter: 10_000,
            dense_limit: 20_000,
            sparse_neighbors: 30,
            bandwidth_sample: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadOutcome {
    /// Sorted by id, one per embedded instance.
    pub scores: Vec<AttentionScore>,
    pub iterations: usize,
    pub converged: bool,
    pub sigma: f64,
}

/// Median pairwise distance over at most `sample` evenly strided rows; 1.0
/// when that median is zero.
pub fn median_bandwidth(points: &Matrix, sample: usize) -> f64 {
    let n = points.rows();
    let m = n.min(sample.max(2));
    let idx: Vec<usize> = (0..m).map(|i| i * n / m).collect();
    let mut d = Vec::with_capacity(m * m.saturating_sub(1) / 2);
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            d.push(dist(points.row(idx[a]), points.row(idx[b])));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, median, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *median > 0.0 {
        *median
    } else {
        1.0
    }
}

enum Graph {
    /// Row-major upper triangle without the diagonal.
    Packed { n: usize, s: Vec<f64> },
    /// Compressed rows, symmetric.
    Sparse { start: Vec<usize>, col: Vec<usize>, s: Vec<f64> },
}

impl Graph {
    fn dense(points: &Matrix, sigma: f64) -> Self {
        let n = points.rows();
        let gamma = 1.0 / (2.0 * sigma * sigma);
        let mut s = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        let mut degree = alloc::vec![0.0; n];
        for i in 0..n {
            for j in i + 1..n {
                let w = libm::exp(-gamma * sq_dist(points.row(i), points.row(j)));
                degree[i] += w;
                degree[j] += w;
                s.push(w);
            }
        }
        let scale: Vec<f64> = degree.iter().map(|&d| if d > 0.0 { 1.0 / libm::sqrt(d) } else { 0.0 }).collect();
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                s[k] *= scale[i] * scale[j];
                k += 1;
            }
        }
        Graph::Packed { n, s }
    }

    fn sparse(points: &Matrix, sigma: f64, neighbors: usize) -> Self {
        let n = points.rows();
        let gamma = 1.0 / (2.0 * sigma * sigma);
        let mut rows: Vec<BTreeMap<usize, f64>> = alloc::vec![BTreeMap::new(); n];
        for i in 0..n {
            for j in nearest_rows(points, i, neighbors) {
                let w = libm::exp(-gamma * sq_dist(points.row(i), points.row(j)));
                rows[i].insert(j, w);
                rows[j].insert(i, w);
            }
        }
        let degree: Vec<f64> = rows.iter().map(|r| r.values().sum()).collect();
        let scale: Vec<f64> = degree.iter().map(|&d| if d > 0.0 { 1.0 / libm::sqrt(d) } else { 0.0 }).collect();
        let mut start = Vec::with_capacity(n + 1);
        let (mut col, mut s) = (Vec::new(), Vec::new());
        start.push(0);
        for (i, r) in rows.iter().enumerate() {
            for (&j, &w) in r {
                col.push(j);
                s.push(w * scale[i] * scale[j]);
            }
            start.push(col.len());
        }
        Graph::Sparse { start, col, s }
    }

    /// `out = S f` for a two-column `f` stored as `[f0, f1]` pairs.
    fn apply(&self, f: &[[f64; 2]], out: &mut [[f64; 2]]) {
        out.iter_mut().for_each(|o| *o = [0.0; 2]);
        match self {
            Graph::Packed { n, s } => {
                let mut k = 0;
                for i in 0..*n {
                    let fi = f[i];
                    let mut acc = [0.0; 2];
                    for j in i + 1..*n {
                        let w = s[k];
                        k += 1;
                        acc[0] += w * f[j][0];
                        acc[1] += w * f[j][1];
                        out[j][0] += w * fi[0];
                        out[j][1] += w * fi[1];
                    }
                    out[i][0] += acc[0];
                    out[i][1] += acc[1];
                }
            }
            Graph::Sparse { start, col, s } => {
                for (i, o) in out.iter_mut().enumerate() {
                    for e in start[i]..start[i + 1] {
                        o[0] += s[e] * f[col[e]][0];
                        o[1] += s[e] * f[col[e]][1];
                    }
                }
            }
        }
    }
}

fn check(cfg: &SpreadConfig) -> Result<()> {
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha {} outside (0, 1)", cfg.alpha)));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance {} must be positive", cfg.tol)));
    }
    if let Bandwidth::Fixed(s) = cfg.bandwidth {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidParameter(format!("bandwidth {s} must be positive")));
        }
    }
    if cfg.sparse_neighbors == 0 {
        return Err(Error::InvalidParameter("sparse graph needs at least one neighbor".into()));
    }
    Ok(())
}

/// Spreads `labels` over every instance of `embedding`.
///
/// `p_correct = F_correct / (F_correct + F_incorrect)`. Where both are zero
/// (an instance with no path to any label) a labeled instance keeps its own
/// answer and an unlabeled one gets 0.5.
pub fn spread_labels(embedding: &Embedding, labels: &[AttentionLabel], cfg: &SpreadConfig) -> Result<SpreadOutcome> {
    check(cfg)?;
    if labels.is_empty() {
        return Err(Error::NoLabels);
    }
    let points = embedding.coords();
    if !points.is_finite() {
        return Err(Error::InvalidParameter("embedding has non-finite coordinates".into()));
    }
    let n = embedding.len();
    let mut y = alloc::vec![[0.0f64; 2]; n];
    let mut seen = alloc::vec![false; n];
    for l in labels {
        let i = embedding.index_of(&l.id).ok_or_else(|| Error::UnknownId(l.id.clone()))?;
        if seen[i] {
            return Err(Error::DuplicateId(l.id.clone()));
        }
        seen[i] = true;
        y[i] = match l.value {
            AttentionValue::Correct => [1.0, 0.0],
            AttentionValue::Incorrect => [0.0, 1.0],
        };
    }

    let sigma = match cfg.bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Auto => median_bandwidth(points, cfg.bandwidth_sample),
    };
    let graph = if n <= cfg.dense_limit {
        Graph::dense(points, sigma)
    } else {
        Graph::sparse(points, sigma, cfg.sparse_neighbors)
    };

    let alpha = cfg.alpha;
    let bound = alpha / (1.0 - alpha);
    let mut f = y.clone();
    let mut next = alloc::vec![[0.0f64; 2]; n];
    let (mut iterations, mut converged) = (0, false);
    while iterations < cfg.max_iter {
        graph.apply(&f, &mut next);
        let mut delta = 0.0;
        for ((nx, old), yy) in next.iter_mut().zip(&f).zip(&y) {
            for c in 0..2 {
                nx[c] = alpha * nx[c] + (1.0 - alpha) * yy[c];
                delta += (nx[c] - old[c]) * (nx[c] - old[c]);
            }
        }
        core::mem::swap(&mut f, &mut next);
        iterations += 1;
        if bound * libm::sqrt(delta) < cfg.tol {
            converged = true;
            break;
        }
    }

    let scores = embedding
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let denom = f[i][0] + f[i][1];
            let p = if denom > 0.0 {
                f[i][0] / denom
            } else if seen[i] {
                y[i][0]
            } else {
                0.5
            };
            AttentionScore { id: id.clone(), p_correct: p.clamp(0.0, 1.0) }
        })
        .collect();
    Ok(SpreadOutcome { scores, iterations, converged, sigma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbedMethod;
    use alloc::string::ToString;
    use alloc::vec;

    fn emb(points: &[[f64; 2]]) -> Embedding {
        let ids = (0..points.len()).map(|i| format!("n{i:03}")).collect();
        Embedding::from_parts(ids, Matrix::from_rows(points).unwrap(), 0, EmbedMethod::Pca).unwrap()
    }

    fn label(i: usize, value: AttentionValue) -> AttentionLabel {
        AttentionLabel { id: format!("n{i:03}"), value, source: LabelSource::Oracle }
    }

    #[test]
    fn single_class_seeds_give_certainty() {
        let e = emb(&[[0.0, 0.0], [1.0, 0.0], [5.0, 2.0], [3.0, 3.0]]);
        let out = spread_labels(&e, &[label(0, AttentionValue::Correct)], &SpreadConfig::default()).unwrap();
        assert!(out.converged);
        assert!(out.scores.iter().all(|s| (s.p_correct - 1.0).abs() < 1e-12));
    }

    #[test]
    fn symmetric_query_is_undecided() {
        let e = emb(&[[-1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]);
        let labels = [label(0, AttentionValue::Correct), label(1, AttentionValue::Incorrect)];
        let out = spread_labels(&e, &labels, &SpreadConfig::default()).unwrap();
        assert!((out.scores[2].p_correct - 0.5).abs() < 1e-6);
        assert!(out.scores[0].p_correct > 0.5 && out.scores[1].p_correct < 0.5);
    }

    #[test]
    fn sparse_and_dense_agree_on_a_complete_graph() {
        let pts: Vec<[f64; 2]> = (0..12).map(|i| [f64::from(i % 4), f64::from(i / 4)]).collect();
        let e = emb(&pts);
        let labels = [label(0, AttentionValue::Correct), label(11, AttentionValue::Incorrect)];
        let dense = spread_labels(&e, &labels, &SpreadConfig::default()).unwrap();
        let cfg = SpreadConfig { dense_limit: 0, sparse_neighbors: 11, ..Default::default() };
        let sparse = spread_labels(&e, &labels, &cfg).unwrap();
        for (a, b) in dense.scores.iter().zip(&sparse.scores) {
            assert!((a.p_correct - b.p_correct).abs() < 1e-9);
        }
    }

    #[test]
    fn isolated_points_fall_back() {
        // Tiny bandwidth underflows every affinity to zero.
        let e = emb(&[[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]]);
        let cfg = SpreadConfig { bandwidth: Bandwidth::Fixed(0.01), ..Default::default() };
        let out = spread_labels(&e, &[label(1, AttentionValue::Incorrect)], &cfg).unwrap();
        assert_eq!(out.scores[0].p_correct, 0.5);
        assert_eq!(out.scores[1].p_correct, 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        let e = emb(&[[0.0, 0.0], [1.0, 0.0]]);
        let cfg = SpreadConfig::default();
        assert_eq!(spread_labels(&e, &[], &cfg), Err(Error::NoLabels));
        let stranger = AttentionLabel { id: "zz".to_string(), ..label(0, AttentionValue::Correct) };
        assert!(matches!(spread_labels(&e, &[stranger], &cfg), Err(Error::UnknownId(_))));
        let twice = [label(0, AttentionValue::Correct), label(0, AttentionValue::Incorrect)];
        assert!(matches!(spread_labels(&e, &twice, &cfg), Err(Error::DuplicateId(_))));
        let bad = SpreadConfig { alpha: 1.0, ..cfg };
        assert!(matches!(
            spread_labels(&e, &[label(0, AttentionValue::Correct)], &bad),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn median_bandwidth_examples() {
        let m = Matrix::from_rows(&[[0.0], [1.0], [3.0]]).unwrap();
        // Distances 1, 3, 2.
        assert_eq!(median_bandwidth(&m, 1000), 2.0);
        let flat = Matrix::from_rows(&[[2.0], [2.0]]).unwrap();
        assert_eq!(median_bandwidth(&flat, 1000), 1.0);
    }

    #[test]
    fn label_order_is_irrelevant() {
        let pts: Vec<[f64; 2]> = (0..20).map(|i| [f64::from(i), f64::from(i * i % 7)]).collect();
        let e = emb(&pts);
        let mut labels = vec![
            label(0, AttentionValue::Correct),
            label(7, AttentionValue::Incorrect),
            label(13, AttentionValue::Correct),
        ];
        let a = spread_labels(&e, &labels, &SpreadConfig::default()).unwrap();
        labels.reverse();
        let b = spread_labels(&e, &labels, &SpreadConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
