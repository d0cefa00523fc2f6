//! k-means over the attention space, elbow selection of `k`, and
//! center-nearest representatives.
//!
//! Every entry point sorts its input by id first. Results therefore depend on
//! the set of `(id, point)` pairs and the seed, never on input order.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::RangeInclusive;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::sort_by_id;
use crate::linalg::{sq_dist, Matrix};
use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Lloyd stops once no center moves farther than this.
    pub tol: f64,
    /// Independent k-means++ starts; the lowest-inertia run wins.
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { max_iter: 300, tol: 1e-6, restarts: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    /// `k x dim`.
    pub centers: Matrix,
    /// Sorted ascending.
    pub ids: Vec<String>,
    /// `assignment[i]` is the cluster of `ids[i]`.
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub seed: u64,
}

impl ClusterModel {
    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        self.ids.binary_search_by(|probe| probe.as_str().cmp(id)).ok().map(|i| self.assignment[i])
    }

    /// Row indices (into [`ClusterModel::ids`]) of each cluster's members.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = alloc::vec![Vec::new(); self.k];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members().iter().map(Vec::len).collect()
    }

    /// Sum of squared distances from `points` (sorted like `ids`) to their
    /// assigned centers.
    pub fn inertia_of(&self, points: &Matrix) -> f64 {
        self.assignment.iter().enumerate().map(|(i, &c)| sq_dist(points.row(i), self.centers.row(c))).sum()
    }
}

/// k-means++ seeded Lloyd iterations, best of `cfg.restarts` runs.
pub fn kmeans(ids: &[String], points: &Matrix, k: usize, seed: u64, cfg: &KMeansConfig) -> Result<ClusterModel> {
    let (ids, points) = sort_by_id(ids.to_vec(), points)?;
    kmeans_sorted(ids, &points, k, seed, cfg)
}

fn kmeans_sorted(ids: Vec<String>, points: &Matrix, k: usize, seed: u64, cfg: &KMeansConfig) -> Result<ClusterModel> {
    validate(points, k)?;
    if cfg.restarts == 0 {
        return Err(Error::InvalidParameter("k-means needs at least one restart".into()));
    }
    let mut best: Option<(Matrix, Vec<usize>, f64)> = None;
    for r in 0..cfg.restarts {
        let run = lloyd(points, k, &mut rng::stream(seed, r as u64), cfg);
        if best.as_ref().map_or(true, |b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (centers, assignment, inertia) = best.expect("at least one restart");
    Ok(ClusterModel { k, centers, ids, assignment, inertia, seed })
}

fn validate(points: &Matrix, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidK("k must be positive".into()));
    }
    if k > points.rows() {
        return Err(Error::InvalidK(format!("k = {k} exceeds the {} points", points.rows())));
    }
    if !points.is_finite() {
        return Err(Error::InvalidParameter("points are not finite".into()));
    }
    Ok(())
}

fn plus_plus<R: Rng>(points: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = points.rows();
    let mut centers = Matrix::zeros(k, points.cols());
    centers.row_mut(0).copy_from_slice(points.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centers.row(c)));
        }
    }
    centers
}

/// Nearest center for every point (ties to the lower index) and the inertia.
fn assign(points: &Matrix, centers: &Matrix, out: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (i, slot) in out.iter_mut().enumerate() {
        let p = points.row(i);
        let mut best = (f64::INFINITY, 0);
        for c in 0..centers.rows() {
            let d = sq_dist(p, centers.row(c));
            if d < best.0 {
                best = (d, c);
            }
        }
        *slot = best.1;
        inertia += best.0;
    }
    inertia
}

fn lloyd<R: Rng>(points: &Matrix, k: usize, rng: &mut R, cfg: &KMeansConfig) -> (Matrix, Vec<usize>, f64) {
    let (n, dim) = (points.rows(), points.cols());
    let mut centers = plus_plus(points, k, rng);
    let mut assignment = alloc::vec![0; n];
    let mut inertia = assign(points, &centers, &mut assignment);
    for _ in 0..cfg.max_iter {
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = alloc::vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for (c, &count) in counts.iter().enumerate() {
            // An empty cluster keeps its center and is dropped downstream.
            if count == 0 {
                continue;
            }
            let inv = 1.0 / count as f64;
            sums.row_mut(c).iter_mut().for_each(|s| *s *= inv);
            shift = shift.max(sq_dist(sums.row(c), centers.row(c)));
            centers.row_mut(c).copy_from_slice(sums.row(c));
        }
        let next = assign(points, &centers, &mut assignment);
        debug_assert!(next <= inertia * (1.0 + 1e-12) + 1e-12, "inertia rose from {inertia} to {next}");
        inertia = next;
        if libm::sqrt(shift) < cfg.tol {
            break;
        }
    }
    (centers, assignment, inertia)
}

/// Result of an elbow scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Elbow {
    pub k: usize,
    /// `(k, inertia)` for every scanned `k`.
    pub inertias: Vec<(usize, f64)>,
}

/// Picks the interior `k` with the largest second difference of inertia.
///
/// Second differences within `1e-9` (relative to the largest inertia) of the
/// maximum count as ties, which go to the smallest `k`.
pub fn elbow_select(
    ids: &[String],
    points: &Matrix,
    range: RangeInclusive<usize>,
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<Elbow> {
    let (lo, hi) = (*range.start(), *range.end());
    if lo == 0 || hi < lo + 2 {
        return Err(Error::InvalidK(format!("elbow range {lo}..={hi} needs at least three positive values")));
    }
    if hi > points.rows() {
        return Err(Error::InvalidK(format!("elbow range ends at {hi} but there are only {} points", points.rows())));
    }
    let (ids, points) = sort_by_id(ids.to_vec(), points)?;
    let mut inertias = Vec::with_capacity(hi - lo + 1);
    for k in lo..=hi {
        let m = kmeans_sorted(ids.clone(), &points, k, seed, cfg)?;
        inertias.push((k, m.inertia));
    }
    let scale = inertias.iter().fold(0.0f64, |m, &(_, v)| m.max(v.abs()));
    let tie = 1e-9 * scale.max(f64::MIN_POSITIVE);
    let mut best: Option<(usize, f64)> = None;
    for w in inertias.windows(3) {
        let second = w[0].1 - 2.0 * w[1].1 + w[2].1;
        if best.map_or(true, |(_, b)| second > b + tie) {
            best = Some((w[1].0, second));
        }
    }
    Ok(Elbow { k: best.expect("range has an interior point").0, inertias })
}

/// One id per non-empty cluster: the member nearest the center, ties to the
/// lexicographically smallest id. Ordered by cluster index.
pub fn select_representatives(model: &ClusterModel, ids: &[String], points: &Matrix) -> Result<Vec<String>> {
    let (ids, points) = sort_by_id(ids.to_vec(), points)?;
    if ids != model.ids {
        let odd = ids
            .iter()
            .find(|id| model.cluster_of(id).is_none())
            .or_else(|| model.ids.iter().find(|id| ids.binary_search(id).is_err()))
            .cloned()
            .unwrap_or_default();
        return Err(Error::UnknownId(odd));
    }
    if points.cols() != model.centers.cols() {
        return Err(Error::ShapeMismatch(format!(
            "points have {} columns, centers have {}",
            points.cols(),
            model.centers.cols()
        )));
    }
    let mut best: Vec<Option<(f64, usize)>> = alloc::vec![None; model.k];
    for (i, &c) in model.assignment.iter().enumerate() {
        let d = sq_dist(points.row(i), model.centers.row(c));
        // Ids are sorted, so strict improvement keeps the smallest id on ties.
        if best[c].map_or(true, |(b, _)| d < b) {
            best[c] = Some((d, i));
        }
    }
    Ok(best.into_iter().flatten().map(|(_, i)| ids[i].clone()).collect())
}
