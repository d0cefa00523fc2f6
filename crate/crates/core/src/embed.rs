//! Low-dimensional attention space.
//!
//! Two projections are available. [`EmbedMethod::Pca`] is deterministic and
//! exact. [`EmbedMethod::NeighborGraph`] builds a symmetric k-nearest-neighbor
//! graph in the input space and lays it out with a spring-electrical
//! objective optimized by seeded SGD: graph edges attract with force
//! `2 / (1 + d^2)` and sampled non-neighbors repel with force
//! `2 / ((0.001 + d^2)(1 + d^2))`. The layout starts from the PCA projection.
//!
//! Inputs are sorted by id before anything else, so the output does not
//! depend on the order vectors are passed in.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::WeightedFeature;
use crate::linalg::{nearest_rows, sq_dist, Matrix};
use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMethod {
    NeighborGraph,
    #[default]
    Pca,
}

/// Layout parameters for [`EmbedMethod::NeighborGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphLayout {
    /// Neighbors per point in the input-space graph (Euclidean).
    pub neighbors: usize,
    pub epochs: usize,
    /// Repulsive samples per edge endpoint and epoch.
    pub negative_samples: usize,
    /// Initial SGD step; decays linearly to zero.
    pub learning_rate: f64,
}

impl Default for GraphLayout {
    fn default() -> Self {
        Self { neighbors: 15, epochs: 200, negative_samples: 5, learning_rate: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub dim: usize,
    pub seed: u64,
    pub method: EmbedMethod,
    pub layout: GraphLayout,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self { dim: 2, seed: 0, method: EmbedMethod::Pca, layout: GraphLayout::default() }
    }
}

/// Coordinates of every instance in the attention space, sorted by id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    ids: Vec<String>,
    coords: Matrix,
    pub seed: u64,
    pub method: EmbedMethod,
}

impl Embedding {
    /// Wraps precomputed coordinates (for example, read back from disk).
    pub fn from_parts(ids: Vec<String>, coords: Matrix, seed: u64, method: EmbedMethod) -> Result<Self> {
        if ids.len() != coords.rows() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} ids for {} coordinate rows",
                ids.len(),
                coords.rows()
            )));
        }
        if coords.cols() == 0 {
            return Err(Error::InvalidParameter("embedding dimension must be positive".into()));
        }
        if !coords.is_finite() {
            return Err(Error::InvalidParameter("embedding has non-finite coordinates".into()));
        }
        let (ids, coords) = sort_by_id(ids, &coords)?;
        Ok(Self { ids, coords, seed, method })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn coords(&self) -> &Matrix {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.binary_search_by(|probe| probe.as_str().cmp(id)).ok()
    }

    pub fn coordinate(&self, id: &str) -> Option<&[f64]> {
        self.index_of(id).map(|i| self.coords.row(i))
    }
}

/// Sorts `(id, row)` pairs by id and rejects duplicates.
pub(crate) fn sort_by_id(ids: Vec<String>, rows: &Matrix) -> Result<(Vec<String>, Matrix)> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    for w in order.windows(2) {
        if ids[w[0]] == ids[w[1]] {
            return Err(Error::DuplicateId(ids[w[0]].clone()));
        }
    }
    let coords = rows.select_rows(&order);
    let mut slots: Vec<Option<String>> = ids.into_iter().map(Some).collect();
    let ids = order.iter().map(|&i| slots[i].take().unwrap_or_default()).collect();
    Ok((ids, coords))
}

/// Projects pooled vectors into a `cfg.dim`-dimensional attention space.
pub fn embed(vectors: &[WeightedFeature], cfg: &EmbedConfig) -> Result<Embedding> {
    if cfg.dim == 0 {
        return Err(Error::InvalidParameter("embedding dimension must be positive".into()));
    }
    if vectors.len() < cfg.dim + 1 {
        return Err(Error::TooFewPoints { needed: cfg.dim + 1, got: vectors.len() });
    }
    let rows: Vec<&[f64]> = vectors.iter().map(|v| v.vector.as_slice()).collect();
    let points = Matrix::from_rows(&rows)?;
    if !points.is_finite() {
        return Err(Error::InvalidParameter("input vectors are not finite".into()));
    }
    let ids = vectors.iter().map(|v| v.id.clone()).collect();
    let (ids, points) = sort_by_id(ids, &points)?;
    let coords = match cfg.method {
        EmbedMethod::Pca => pca(&points, cfg.dim)?,
        EmbedMethod::NeighborGraph => neighbor_graph(&points, cfg.dim, cfg.seed, &cfg.layout)?,
    };
    Ok(Embedding { ids, coords, seed: cfg.seed, method: cfg.method })
}

/// Projection onto the top `dim` principal axes.
///
/// Components whose variance is below `1e-12` of the leading one are returned
/// as exact zeros. Each axis is oriented so that its largest-magnitude entry
/// is positive.
pub fn pca(points: &Matrix, dim: usize) -> Result<Matrix> {
    let (n, c) = (points.rows(), points.cols());
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    let mean = points.column_means();
    let centered = DMatrix::from_fn(n, c, |i, j| points.row(i)[j] - mean[j]);
    if centered.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroVariance);
    }

    // Eigen-decompose whichever of the covariance and Gram matrices is smaller.
    let mut axes: Vec<(f64, Vec<f64>)> = if c <= n {
        let cov = centered.transpose() * &centered;
        let eig = SymmetricEigen::new(cov);
        (0..c).map(|k| (eig.eigenvalues[k], eig.eigenvectors.column(k).iter().copied().collect())).collect()
    } else {
        let gram = &centered * centered.transpose();
        let eig = SymmetricEigen::new(gram);
        (0..n)
            .map(|k| {
                let u = eig.eigenvectors.column(k);
                let v = centered.transpose() * u;
                let norm = v.norm();
                let v = if norm > 0.0 { v / norm } else { v };
                (eig.eigenvalues[k], v.iter().copied().collect())
            })
            .collect()
    };
    axes.sort_by(|a, b| b.0.total_cmp(&a.0));
    let leading = axes[0].0;
    if !(leading > 0.0) {
        return Err(Error::ZeroVariance);
    }

    let mut out = Matrix::zeros(n, dim);
    for (k, (lambda, axis)) in axes.iter_mut().take(dim).enumerate() {
        if *lambda <= 1e-12 * leading {
            continue;
        }
        orient(axis);
        for i in 0..n {
            out.row_mut(i)[k] = centered.row(i).iter().zip(axis.iter()).map(|(x, a)| x * a).sum();
        }
    }
    Ok(out)
}

fn orient(axis: &mut [f64]) {
    let mut best = 0;
    for (i, v) in axis.iter().enumerate() {
        if v.abs() > axis[best].abs() {
            best = i;
        }
    }
    if axis[best] < 0.0 {
        axis.iter_mut().for_each(|v| *v = -*v);
    }
}

fn neighbor_graph(points: &Matrix, dim: usize, seed: u64, layout: &GraphLayout) -> Result<Matrix> {
    let n = points.rows();
    let k = layout.neighbors.min(n - 1);
    if k == 0 {
        return Err(Error::InvalidParameter("neighbor graph needs at least one neighbor".into()));
    }
    let mut edges = BTreeSet::new();
    for i in 0..n {
        for j in nearest_rows(points, i, k) {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    let edges: Vec<(usize, usize)> = edges.into_iter().collect();

    let mut rng = rng::stream(seed, 0);
    let mut y = pca(points, dim)?;
    let scale = y.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if scale > 0.0 { 10.0 / scale } else { 1.0 };
    for i in 0..n {
        for v in y.row_mut(i) {
            *v = *v * scale + rng.random_range(-1e-4..1e-4);
        }
    }

    let clip = |g: f64| g.clamp(-4.0, 4.0);
    let mut grad = alloc::vec![0.0; dim];
    for epoch in 0..layout.epochs {
        let step = layout.learning_rate * (1.0 - epoch as f64 / layout.epochs as f64);
        for &(i, j) in &edges {
            let d2 = sq_dist(y.row(i), y.row(j));
            let coef = -2.0 / (1.0 + d2);
            for (d, g) in grad.iter_mut().enumerate() {
                *g = clip(coef * (y.row(i)[d] - y.row(j)[d])) * step;
            }
            for (d, g) in grad.iter().enumerate() {
                y.row_mut(i)[d] += g;
                y.row_mut(j)[d] -= g;
            }
            for head in [i, j] {
                for _ in 0..layout.negative_samples {
                    let other = rng.random_range(0..n);
                    if other == head {
                        continue;
                    }
                    let d2 = sq_dist(y.row(head), y.row(other));
                    let coef = 2.0 / ((0.001 + d2) * (1.0 + d2));
                    for (d, g) in grad.iter_mut().enumerate() {
                        *g = clip(coef * (y.row(head)[d] - y.row(other)[d])) * step;
                    }
                    for (d, g) in grad.iter().enumerate() {
                        y.row_mut(head)[d] += g;
                    }
                }
            }
        }
    }
    Ok(y)
}
