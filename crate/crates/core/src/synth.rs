//! Planted core/spurious patch data and a two-layer cubic network.
//!
//! Every instance is `P` patches of dimension `d` with a label `y = ±1` and a
//! spurious attribute `s`, equal to `y` with probability `alpha`. One patch is
//! the core feature `beta_c * y * v_c`, one is the spurious feature
//! `beta_s * s * v_s`, and the rest are Gaussian noise with per-coordinate
//! variance `sigma_p^2 / d`. `v_c` and `v_s` are orthonormal.
//!
//! The network is `f(x) = sum_j sum_p <w_j, x_p>^3`, trained by full-batch
//! gradient descent on the mean logistic loss `log(1 + exp(-y f(x)))`. Since
//! `f` is a sum over patches, `c_p = sum_j <w_j, x_p>^3` is an exact
//! attribution of the output to patch `p`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, norm, Matrix};
use crate::spread::AttentionValue;
use crate::{rng, Error, Result, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchLayout {
    /// Core feature in patch 0, spurious feature in patch 1.
    #[default]
    Fixed,
    /// Both positions drawn uniformly per instance, never equal.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub d: usize,
    pub patches: usize,
    pub alpha: f64,
    pub beta_c: f64,
    pub beta_s: f64,
    pub sigma_p: f64,
    pub seed: u64,
    pub layout: PatchLayout,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_samples: 4000,
            d: 50,
            patches: 5,
            alpha: 0.95,
            beta_c: 1.0,
            beta_s: 2.0,
            sigma_p: 3.0,
            seed: 0,
            layout: PatchLayout::Fixed,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patches < 3 {
            return Err(Error::InvalidParameter(format!("need at least 3 patches, got {}", self.patches)));
        }
        if self.d < 2 {
            return Err(Error::InvalidParameter(format!("patch dimension must be at least 2, got {}", self.d)));
        }
        // 0.5 is allowed for balanced held-out sets.
        if !(0.5..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!("alpha {} outside [0.5, 1]", self.alpha)));
        }
        for (name, v) in [("beta_c", self.beta_c), ("beta_s", self.beta_s), ("sigma_p", self.sigma_p)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} = {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticInstance {
    pub id: String,
    /// `P x d`.
    pub patches: Matrix,
    pub y: i8,
    pub s: i8,
    pub core_index: usize,
    pub spurious_index: usize,
}

impl SyntheticInstance {
    /// 1 when the spurious attribute agrees with the label, 0 otherwise.
    pub fn group(&self) -> usize {
        usize::from(self.s == self.y)
    }

    /// Class index: 0 for `y = -1`, 1 for `y = +1`.
    pub fn class(&self) -> usize {
        usize::from(self.y > 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub v_c: Vec<f64>,
    pub v_s: Vec<f64>,
    pub instances: Vec<SyntheticInstance>,
}

impl SyntheticDataset {
    /// Fraction of instances with `s = y`.
    pub fn alpha_hat(&self) -> f64 {
        alpha_hat(self.instances.iter())
    }
}

pub fn alpha_hat<'a>(instances: impl IntoIterator<Item = &'a SyntheticInstance>) -> f64 {
    let (mut agree, mut n) = (0usize, 0usize);
    for i in instances {
        agree += i.group();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        agree as f64 / n as f64
    }
}

/// Two orthonormal directions in `R^d` drawn from `seed`.
pub fn feature_directions(d: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = rng::stream(seed, 0);
    loop {
        let mut a: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut b: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let na = norm(&a);
        if na < 1e-8 {
            continue;
        }
        a.iter_mut().for_each(|v| *v /= na);
        let proj = dot(&a, &b);
        b.iter_mut().zip(&a).for_each(|(v, u)| *v -= proj * u);
        let nb = norm(&b);
        if nb < 1e-8 {
            continue;
        }
        b.iter_mut().for_each(|v| *v /= nb);
        return (a, b);
    }
}

/// Draws `cfg.n_samples` instances with fresh directions from `cfg.seed`.
pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let (v_c, v_s) = feature_directions(cfg.d, cfg.seed);
    generate_with(cfg, v_c, v_s, "s")
}

/// Draws instances around given directions, with ids `{prefix}{index:06}`.
/// Useful for held-out sets that share a training set's features.
pub fn generate_with(cfg: &SyntheticConfig, v_c: Vec<f64>, v_s: Vec<f64>, prefix: &str) -> Result<SyntheticDataset> {
    cfg.validate()?;
    if v_c.len() != cfg.d || v_s.len() != cfg.d {
        return Err(Error::ShapeMismatch(format!(
            "directions have lengths {} and {}, expected {}",
            v_c.len(),
            v_s.len(),
            cfg.d
        )));
    }
    let mut rng = rng::stream(cfg.seed, 1);
    let noise = cfg.sigma_p / libm::sqrt(cfg.d as f64);
    let mut instances = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let y: i8 = if rng.random::<bool>() { 1 } else { -1 };
        let s = if rng.random::<f64>() < cfg.alpha { y } else { -y };
        let (core_index, spurious_index) = match cfg.layout {
            PatchLayout::Fixed => (0, 1),
            PatchLayout::Random => {
                let c = rng.random_range(0..cfg.patches);
                (c, (c + rng.random_range(1..cfg.patches)) % cfg.patches)
            }
        };
        let mut patches = Matrix::zeros(cfg.patches, cfg.d);
        for p in 0..cfg.patches {
            let row = patches.row_mut(p);
            if p == core_index {
                row.iter_mut().zip(&v_c).for_each(|(x, v)| *x = cfg.beta_c * f64::from(y) * v);
            } else if p == spurious_index {
                row.iter_mut().zip(&v_s).for_each(|(x, v)| *x = cfg.beta_s * f64::from(s) * v);
            } else {
                for x in row {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x = noise * z;
                }
            }
        }
        instances.push(SyntheticInstance { id: format!("{prefix}{i:06}"), patches, y, s, core_index, spurious_index });
    }
    Ok(SyntheticDataset { config: cfg.clone(), v_c, v_s, instances })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnModel {
    /// One filter per row, `J x d`.
    pub w: Matrix,
    pub sigma0: f64,
}

impl CnnModel {
    /// Filters drawn i.i.d. from `N(0, sigma0^2)`.
    pub fn init(d: usize, filters: usize, sigma0: f64, seed: u64) -> Result<Self> {
        if d == 0 || filters == 0 {
            return Err(Error::InvalidParameter("model needs positive d and filter count".into()));
        }
        if !(sigma0 >= 0.0 && sigma0.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma0 = {sigma0} must be nonnegative")));
        }
        let mut rng = rng::stream(seed, 2);
        let data = (0..d * filters)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sigma0 * z
            })
            .collect();
        Ok(Self { w: Matrix::from_vec(filters, d, data)?, sigma0 })
    }

    pub fn filters(&self) -> usize {
        self.w.rows()
    }

    pub fn d(&self) -> usize {
        self.w.cols()
    }

    /// `<w_j, v>` for every filter.
    pub fn alignment(&self, v: &[f64]) -> Vec<f64> {
        self.w.iter_rows().map(|w| dot(w, v)).collect()
    }

    fn check(&self, x: &SyntheticInstance) -> Result<()> {
        if x.patches.cols() != self.d() {
            return Err(Error::ShapeMismatch(format!(
                "patch dimension {} does not match model dimension {}",
                x.patches.cols(),
                self.d()
            )));
        }
        Ok(())
    }
}

/// `c_p = sum_j <w_j, x_p>^3`.
pub fn patch_attribution(model: &CnnModel, x: &SyntheticInstance) -> Result<Vec<f64>> {
    model.check(x)?;
    Ok(x.patches
        .iter_rows()
        .map(|p| {
            model
                .w
                .iter_rows()
                .map(|w| {
                    let z = dot(w, p);
                    z * z * z
                })
                .sum()
        })
        .collect())
}

/// `f(x) = sum_j sum_p <w_j, x_p>^3`.
pub fn cnn_forward(model: &CnnModel, x: &SyntheticInstance) -> Result<f64> {
    Ok(patch_attribution(model, x)?.iter().sum())
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + libm::log1p(libm::exp(-z.abs()))
}

/// Mean logistic loss and its gradient with respect to the filters.
pub fn loss_and_grad(model: &CnnModel, data: &[SyntheticInstance]) -> Result<(f64, Matrix)> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let (j, d) = (model.filters(), model.d());
    let mut grad = Matrix::zeros(j, d);
    let mut loss = 0.0;
    let inv_n = 1.0 / data.len() as f64;
    let mut z = alloc::vec![0.0; j * data[0].patches.rows()];
    for x in data {
        model.check(x)?;
        let p = x.patches.rows();
        z.resize(j * p, 0.0);
        let mut f = 0.0;
        for (pi, patch) in x.patches.iter_rows().enumerate() {
            for (ji, w) in model.w.iter_rows().enumerate() {
                let v = dot(w, patch);
                z[pi * j + ji] = v;
                f += v * v * v;
            }
        }
        let y = f64::from(x.y);
        let margin = y * f;
        loss += softplus(-margin);
        // d loss / d f = -y / (1 + exp(margin)).
        let coef = -y * libm::exp(-softplus(margin)) * inv_n;
        for (pi, patch) in x.patches.iter_rows().enumerate() {
            for ji in 0..j {
                let v = z[pi * j + ji];
                let c = coef * 3.0 * v * v;
                for (g, xv) in grad.row_mut(ji).iter_mut().zip(patch) {
                    *g += c * xv;
                }
            }
        }
    }
    Ok((loss * inv_n, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { eta: 0.5, steps: 400 }
    }
}

/// Per-step, per-filter alignments with the core and spurious directions.
/// Row `t` holds the weights after `t` updates, so there are `steps + 1` rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTrace {
    pub core: Vec<Vec<f64>>,
    pub spurious: Vec<Vec<f64>>,
    pub loss: Vec<f64>,
}

impl AlignmentTrace {
    pub fn len(&self) -> usize {
        self.core.len()
    }

    pub fn is_empty(&self) -> bool {
        self.core.is_empty()
    }

    pub fn mean_core(&self, step: usize) -> f64 {
        mean(&self.core[step])
    }

    pub fn mean_spurious(&self, step: usize) -> f64 {
        mean(&self.spurious[step])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Full-batch gradient descent. `loss[t]` is the loss at the weights of row `t`
/// (the final entry is the loss after the last update).
pub fn train_gd(
    model: &CnnModel,
    data: &[SyntheticInstance],
    v_c: &[f64],
    v_s: &[f64],
    cfg: &TrainConfig,
) -> Result<(CnnModel, AlignmentTrace)> {
    if !(cfg.eta >= 0.0 && cfg.eta.is_finite()) {
        return Err(Error::InvalidParameter(format!("learning rate {} must be nonnegative", cfg.eta)));
    }
    let mut m = model.clone();
    let mut trace = AlignmentTrace::default();
    for step in 0..=cfg.steps {
        trace.core.push(m.alignment(v_c));
        trace.spurious.push(m.alignment(v_s));
        let (loss, grad) = loss_and_grad(&m, data)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Divergence { step });
        }
        trace.loss.push(loss);
        if step == cfg.steps {
            break;
        }
        let next: Vec<f64> = m.w.as_slice().iter().zip(grad.as_slice()).map(|(w, g)| w - cfg.eta * g).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: step + 1 });
        }
        m.w = Matrix::from_vec(m.filters(), m.d(), next)?;
    }
    Ok((m, trace))
}

/// Correct iff `y * c_p` has a unique maximum at the core patch.
pub fn oracle_attention_label(model: &CnnModel, x: &SyntheticInstance) -> Result<AttentionValue> {
    let c = patch_attribution(model, x)?;
    let y = f64::from(x.y);
    let best = c.iter().map(|v| y * v).fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<usize> = (0..c.len()).filter(|&p| y * c[p] == best).collect();
    Ok(if winners == [x.core_index] { AttentionValue::Correct } else { AttentionValue::Incorrect })
}

/// Patches as an `[P, 1, d]` feature map.
pub fn feature_tensor(x: &SyntheticInstance) -> Result<Tensor> {
    Tensor::from_f64(alloc::vec![x.patches.rows(), 1, x.patches.cols()], x.patches.as_slice())
}

/// Positive part of `sign * c_p`, divided by its maximum, as a `[P, 1]` grid.
/// All zeros when no patch contributes positively.
pub fn class_map(model: &CnnModel, x: &SyntheticInstance, sign: f64) -> Result<Tensor> {
    let c = patch_attribution(model, x)?;
    let pos: Vec<f64> = c.iter().map(|v| (sign * v).max(0.0)).collect();
    let max = pos.iter().copied().fold(0.0, f64::max);
    let grid: Vec<f64> = if max > 0.0 { pos.iter().map(|v| v / max).collect() } else { pos };
    Tensor::from_f64(alloc::vec![c.len(), 1], &grid)
}

/// Attribution grid for the instance's own label.
pub fn attribution_grid(model: &CnnModel, x: &SyntheticInstance) -> Result<Tensor> {
    class_map(model, x, f64::from(x.y))
}

/// Class maps stacked as `[2, P, 1]`: class 0 (`y = -1`) then class 1.
pub fn class_maps(model: &CnnModel, x: &SyntheticInstance) -> Result<Tensor> {
    let neg = class_map(model, x, -1.0)?;
    let pos = class_map(model, x, 1.0)?;
    let mut data = neg.into_data();
    data.extend(pos.into_data());
    Tensor::new(alloc::vec![2, x.patches.rows(), 1], data)
}

/// Normalized `[x0, y0, x1, y1]` box around the core patch row.
pub fn core_bbox(x: &SyntheticInstance) -> [f64; 4] {
    let p = x.patches.rows() as f64;
    [0.0, x.core_index as f64 / p, 1.0, (x.core_index + 1) as f64 / p]
}
