//! Screening, core/environment subgroups and consistency-weighted sampling.
//!
//! Retained instances are clustered twice: once on attention-weighted vectors
//! (core clusters) and once on inverse-attention vectors (environment
//! clusters). A subgroup is the intersection of one core and one environment
//! cluster.
//!
//! Every cluster gets a consistency `rho = 1 / max(mean distance to center,
//! 1e-9)`. The budget is split over core clusters in proportion to `1 / rho`
//! and each core quota is split over its subgroups the same way, using the
//! subgroup members' distances to their environment center. Both levels use
//! largest-remainder rounding, capped at the available members with the excess
//! handed to the remaining clusters in proportion to their weights.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::attention::WeightedFeature;
use crate::cluster::{elbow_select, kmeans, ClusterModel, KMeansConfig};
use crate::linalg::{dist, Matrix};
use crate::spread::AttentionScore;
use crate::{rng, Error, Result};

pub const RHO_EPSILON: f64 = 1e-9;

/// Ids with `p_correct >= threshold`, sorted.
pub fn screen(scores: &[AttentionScore], threshold: f64) -> Result<Vec<String>> {
    let mut kept: Vec<String> = scores.iter().filter(|s| s.p_correct >= threshold).map(|s| s.id.clone()).collect();
    if kept.is_empty() {
        return Err(Error::EmptyScreen);
    }
    kept.sort();
    Ok(kept)
}

/// `1 / max(mean Euclidean distance to center, 1e-9)`.
pub fn cluster_consistency<R: AsRef<[f64]>>(members: &[R], center: &[f64]) -> f64 {
    let mean = if members.is_empty() {
        0.0
    } else {
        members.iter().map(|m| dist(m.as_ref(), center)).sum::<f64>() / members.len() as f64
    };
    1.0 / mean.max(RHO_EPSILON)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KChoice {
    #[default]
    Auto,
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub k_core: KChoice,
    pub k_env: KChoice,
    /// Inclusive `k` range scanned by the elbow rule for [`KChoice::Auto`],
    /// clipped to the retained count.
    pub auto_range: (usize, usize),
    pub kmeans: KMeansConfig,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            k_core: KChoice::Auto,
            k_env: KChoice::Auto,
            auto_range: (1, 8),
            kmeans: KMeansConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub center: Vec<f64>,
    /// Sorted.
    pub members: Vec<String>,
    pub rho: f64,
    pub quota: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subgroup {
    pub core: usize,
    pub env: usize,
    /// Sorted.
    pub members: Vec<String>,
    pub rho: f64,
    pub quota: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupTable {
    /// `k` handed to k-means in each space, before empty clusters are dropped.
    pub k_core: usize,
    pub k_env: usize,
    pub core: Vec<ClusterSummary>,
    pub env: Vec<ClusterSummary>,
    /// Non-empty intersections ordered by `(core, env)`.
    pub subgroups: Vec<Subgroup>,
    pub budget: usize,
}

impl SubgroupTable {
    pub fn retained(&self) -> usize {
        self.core.iter().map(|c| c.members.len()).sum()
    }
}

/// Looks up the vectors of `ids` (sorted) in `vectors`.
fn gather(ids: &[String], vectors: &[WeightedFeature]) -> Result<Matrix> {
    let by_id: BTreeMap<&str, &[f64]> = vectors.iter().map(|v| (v.id.as_str(), v.vector.as_slice())).collect();
    if by_id.len() != vectors.len() {
        let mut seen = BTreeMap::new();
        for v in vectors {
            if seen.insert(v.id.as_str(), ()).is_some() {
                return Err(Error::DuplicateId(v.id.clone()));
            }
        }
    }
    let rows = ids
        .iter()
        .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| Error::UnknownId(id.clone())))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

fn choose_k(ids: &[String], points: &Matrix, choice: KChoice, cfg: &CurationConfig, salt: u64) -> Result<usize> {
    let n = points.rows();
    match choice {
        KChoice::Fixed(k) if k == 0 || k > n => {
            Err(Error::InvalidK(format!("k = {k} but {n} instances were retained")))
        }
        KChoice::Fixed(k) => Ok(k),
        KChoice::Auto => {
            let (lo, hi) = (cfg.auto_range.0.max(1), cfg.auto_range.1.min(n));
            if hi < lo + 2 {
                return Ok(lo.min(n));
            }
            Ok(elbow_select(ids, points, lo..=hi, rng::mix(cfg.seed, salt), &cfg.kmeans)?.k)
        }
    }
}

/// Non-empty clusters renumbered in cluster-index order, plus the mapping
/// from each row of `points` to its renumbered cluster.
fn summarize(model: &ClusterModel, ids: &[String], points: &Matrix) -> (Vec<ClusterSummary>, Vec<usize>) {
    let mut summaries = Vec::new();
    let mut renumber = alloc::vec![usize::MAX; model.k];
    for (c, members) in model.members().into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        renumber[c] = summaries.len();
        let center = model.centers.row(c).to_vec();
        let rows: Vec<&[f64]> = members.iter().map(|&i| points.row(i)).collect();
        summaries.push(ClusterSummary {
            rho: cluster_consistency(&rows, &center),
            center,
            members: members.iter().map(|&i| ids[i].clone()).collect(),
            quota: 0,
        });
    }
    let assignment = model.assignment.iter().map(|&c| renumber[c]).collect();
    (summaries, assignment)
}

/// Clusters the retained instances in both spaces and forms subgroups.
/// Quotas are left at zero; see [`allocate`].
pub fn cluster_spaces(
    retained: &[String],
    core_vectors: &[WeightedFeature],
    env_vectors: &[WeightedFeature],
    cfg: &CurationConfig,
) -> Result<SubgroupTable> {
    if retained.is_empty() {
        return Err(Error::EmptyScreen);
    }
    let mut ids = retained.to_vec();
    ids.sort();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicateId(w[0].clone()));
    }
    let core_points = gather(&ids, core_vectors)?;
    let env_points = gather(&ids, env_vectors)?;

    let k_core = choose_k(&ids, &core_points, cfg.k_core, cfg, 1)?;
    let k_env = choose_k(&ids, &env_points, cfg.k_env, cfg, 2)?;
    let core_model = kmeans(&ids, &core_points, k_core, rng::mix(cfg.seed, 3), &cfg.kmeans)?;
    let env_model = kmeans(&ids, &env_points, k_env, rng::mix(cfg.seed, 4), &cfg.kmeans)?;
    let (core, core_of) = summarize(&core_model, &ids, &core_points);
    let (env, env_of) = summarize(&env_model, &ids, &env_points);

    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for i in 0..ids.len() {
        cells.entry((core_of[i], env_of[i])).or_default().push(i);
    }
    let subgroups = cells
        .into_iter()
        .map(|((c, e), rows)| {
            let pts: Vec<&[f64]> = rows.iter().map(|&i| env_points.row(i)).collect();
            Subgroup {
                core: c,
                env: e,
                rho: cluster_consistency(&pts, &env[e].center),
                members: rows.iter().map(|&i| ids[i].clone()).collect(),
                quota: 0,
            }
        })
        .collect();
    Ok(SubgroupTable { k_core, k_env, core, env, subgroups, budget: 0 })
}

/// Splits `total` over slots in proportion to `weights`, never exceeding
/// `caps`.
///
/// Slots whose proportional share exceeds their cap are pinned to the cap and
/// the rest is re-split among the others. The final split is rounded by
/// largest remainder, equal remainders going to the lower index.
pub fn apportion(total: usize, weights: &[f64], caps: &[usize]) -> Result<Vec<usize>> {
    if weights.len() != caps.len() {
        return Err(Error::ShapeMismatch(format!("{} weights for {} caps", weights.len(), caps.len())));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::InvalidParameter(format!("weight {w} must be positive and finite")));
    }
    let capacity: usize = caps.iter().sum();
    if total > capacity {
        return Err(Error::BudgetTooLarge { budget: total, available: capacity });
    }
    let mut out = alloc::vec![0usize; weights.len()];
    let mut active: Vec<usize> = (0..weights.len()).filter(|&i| caps[i] > 0).collect();
    let mut remaining = total;
    loop {
        let sum: f64 = active.iter().map(|&i| weights[i]).sum();
        let share = |i: usize| remaining as f64 * weights[i] / sum;
        let pinned: Vec<usize> = active.iter().copied().filter(|&i| share(i) > caps[i] as f64).collect();
        if pinned.is_empty() {
            break;
        }
        for &i in &pinned {
            out[i] = caps[i];
            remaining -= caps[i];
        }
        active.retain(|i| !pinned.contains(i));
    }
    if remaining == 0 || active.is_empty() {
        return Ok(out);
    }

    let sum: f64 = active.iter().map(|&i| weights[i]).sum();
    let mut rema: Vec<(f64, usize)> = Vec::with_capacity(active.len());
    let mut assigned = 0usize;
    for &i in &active {
        let raw = remaining as f64 * weights[i] / sum;
        let floor = (libm::floor(raw) as usize).min(caps[i]);
        out[i] = floor;
        assigned += floor;
        rema.push((raw - floor as f64, i));
    }
    // Largest remainder first, equal remainders to the lower index.
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    if assigned <= remaining {
        let mut left = remaining - assigned;
        for &(_, i) in rema.iter().cycle() {
            if left == 0 {
                break;
            }
            if out[i] < caps[i] {
                out[i] += 1;
                left -= 1;
            }
        }
    } else {
        // Rounding noise pushed the floors past the total.
        let mut over = assigned - remaining;
        for &(_, i) in rema.iter().rev().cycle() {
            if over == 0 {
                break;
            }
            if out[i] > 0 {
                out[i] -= 1;
                over -= 1;
            }
        }
    }
    Ok(out)
}

/// Fills core and subgroup quotas for a budget of `budget` instances.
pub fn allocate(mut table: SubgroupTable, budget: usize) -> Result<SubgroupTable> {
    if budget == 0 {
        return Err(Error::InvalidParameter("budget must be positive".into()));
    }
    let available = table.retained();
    if budget > available {
        return Err(Error::BudgetTooLarge { budget, available });
    }
    let weights: Vec<f64> = table.core.iter().map(|c| 1.0 / c.rho).collect();
    let caps: Vec<usize> = table.core.iter().map(|c| c.members.len()).collect();
    let core_quota = apportion(budget, &weights, &caps)?;
    for (c, q) in table.core.iter_mut().zip(&core_quota) {
        c.quota = *q;
    }
    for (c, &quota) in core_quota.iter().enumerate() {
        let slots: Vec<usize> = (0..table.subgroups.len()).filter(|&g| table.subgroups[g].core == c).collect();
        let weights: Vec<f64> = slots.iter().map(|&g| 1.0 / table.subgroups[g].rho).collect();
        let caps: Vec<usize> = slots.iter().map(|&g| table.subgroups[g].members.len()).collect();
        let split = apportion(quota, &weights, &caps)?;
        for (&g, q) in slots.iter().zip(split) {
            table.subgroups[g].quota = q;
        }
    }
    table.budget = budget;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CuratedEntry {
    pub id: String,
    pub core: usize,
    pub env: usize,
    pub draw_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CuratedSubset {
    /// Sorted by id.
    pub entries: Vec<CuratedEntry>,
}

impl CuratedSubset {
    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Seed used to draw subgroup `(core, env)`.
pub fn draw_seed(seed: u64, core: usize, env: usize) -> u64 {
    rng::mix(seed, ((core as u64) << 32) | env as u64)
}

/// Draws each subgroup's quota uniformly without replacement. Subgroup
/// `(c, e)` uses its own seed derived from `seed`, `c` and `e`.
pub fn draw_samples(table: &SubgroupTable, seed: u64) -> Result<CuratedSubset> {
    let mut entries = Vec::with_capacity(table.budget);
    for g in &table.subgroups {
        assert!(g.quota <= g.members.len(), "quota {} exceeds subgroup size {}", g.quota, g.members.len());
        let draw_seed = draw_seed(seed, g.core, g.env);
        let mut rng = rng::stream(draw_seed, 0);
        for i in index::sample(&mut rng, g.members.len(), g.quota) {
            entries.push(CuratedEntry { id: g.members[i].clone(), core: g.core, env: g.env, draw_seed });
        }
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(CuratedSubset { entries })
}
