//! Attention-weighted feature vectors.
//!
//! A feature map `F` has shape `[H, W, C]` and its attribution grid `A` has
//! shape `[H, W]` with values in `[0, 1]`. Weighting multiplies every channel
//! of a spatial cell by the mask value of that cell; the inverse mask is
//! `1 - A`. Mean pooling over the `H * W` cells turns a weighted map into one
//! vector of length `C`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// `F` weighted by `A`: what the model attends to.
    Attention,
    /// `F` weighted by `1 - A`: what the model ignores.
    Inverse,
    /// `F` pooled without weighting.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedFeature {
    pub id: String,
    pub vector: Vec<f64>,
    pub kind: FeatureKind,
}

impl WeightedFeature {
    /// Weights and pools one instance.
    pub fn build(id: impl Into<String>, f: &Tensor, a: &Tensor, kind: FeatureKind) -> Result<Self> {
        let vector = match kind {
            FeatureKind::Plain => {
                check_shapes(f, a)?;
                pool(f)?
            }
            FeatureKind::Attention => pool(&weight_features(f, a, false)?)?,
            FeatureKind::Inverse => pool(&weight_features(f, a, true)?)?,
        };
        Ok(Self { id: id.into(), vector, kind })
    }
}

fn check_shapes(f: &Tensor, a: &Tensor) -> Result<(usize, usize)> {
    if f.rank() != 3 {
        return Err(Error::ShapeMismatch(format!("feature map must be [H, W, C], got {:?}", f.dims())));
    }
    if a.rank() != 2 || a.dims() != &f.dims()[..2] {
        return Err(Error::ShapeMismatch(format!(
            "attribution {:?} does not match feature grid {:?}",
            a.dims(),
            &f.dims()[..2]
        )));
    }
    Ok((f.dims()[0] * f.dims()[1], f.dims()[2]))
}

/// `out[h, w, c] = m[h, w] * f[h, w, c]` with `m = a`, or `m = 1 - a` when
/// `invert` is set.
pub fn weight_features(f: &Tensor, a: &Tensor, invert: bool) -> Result<Tensor> {
    let (cells, channels) = check_shapes(f, a)?;
    let mut out = Vec::with_capacity(cells * channels);
    for (cell, &mask) in a.data().iter().enumerate() {
        let m = if invert { 1.0 - mask } else { mask };
        out.extend(f.data()[cell * channels..(cell + 1) * channels].iter().map(|&v| m * v));
    }
    Tensor::new(f.dims().to_vec(), out)
}

/// Mean over the spatial cells of an `[H, W, C]` map.
pub fn pool(weighted: &Tensor) -> Result<Vec<f64>> {
    if weighted.rank() != 3 {
        return Err(Error::ShapeMismatch(format!("pooling expects [H, W, C], got {:?}", weighted.dims())));
    }
    let channels = weighted.dims()[2];
    let cells = weighted.len() / channels;
    let mut out = alloc::vec![0.0f64; channels];
    for cell in weighted.data().chunks_exact(channels) {
        for (o, &v) in out.iter_mut().zip(cell) {
            *o += f64::from(v);
        }
    }
    let n = cells as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Brings an exported attribution grid into `[0, 1]`.
///
/// Grids whose maximum exceeds one are divided by that maximum; the returned
/// flag reports whether this happened so callers can warn. Negative values are
/// rejected.
pub fn normalize_attribution(a: Tensor) -> Result<(Tensor, bool)> {
    if let Some(idx) = a.data().iter().position(|&v| v < 0.0) {
        return Err(Error::InvalidTensor(format!("attribution value {} at index {idx} is negative", a.data()[idx])));
    }
    let max = a.data().iter().copied().fold(0.0f32, f32::max);
    if max <= 1.0 {
        return Ok((a, false));
    }
    let dims = a.dims().to_vec();
    let data = a.into_data().into_iter().map(|v| v / max).collect();
    Ok((Tensor::new(dims, data)?, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn t(dims: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn unit_mask_is_identity_and_its_inverse_is_zero() {
        let f = t(&[1, 2, 2], &[1.0, -2.0, 3.5, 4.0]);
        let a = t(&[1, 2], &[1.0, 1.0]);
        assert_eq!(weight_features(&f, &a, false).unwrap(), f);
        let inv = weight_features(&f, &a, true).unwrap();
        assert!(inv.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_mask_halves_channels() {
        let f = t(&[1, 1, 2], &[2.0, 4.0]);
        let a = t(&[1, 1], &[0.5]);
        assert_eq!(weight_features(&f, &a, false).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let f = t(&[2, 1, 3], &[0.0; 6]);
        assert!(weight_features(&f, &t(&[1, 2], &[0.0; 2]), false).is_err());
        assert!(weight_features(&f, &t(&[2], &[0.0; 2]), false).is_err());
    }

    #[test]
    fn pooling_examples() {
        assert_eq!(pool(&t(&[2, 2, 1], &[3.0; 4])).unwrap(), vec![3.0]);
        assert_eq!(pool(&t(&[1, 1, 3], &[1.0, 2.0, 3.0])).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(pool(&t(&[2, 1, 1], &[1.0, 3.0])).unwrap(), vec![2.0]);
    }

    #[test]
    fn attribution_normalization() {
        let (a, rescaled) = normalize_attribution(t(&[1, 2], &[0.2, 1.0])).unwrap();
        assert!(!rescaled);
        assert_eq!(a.data(), &[0.2, 1.0]);
        let (a, rescaled) = normalize_attribution(t(&[1, 2], &[1.0, 4.0])).unwrap();
        assert!(rescaled);
        assert_eq!(a.data(), &[0.25, 1.0]);
        assert!(normalize_attribution(t(&[1, 1], &[-0.1])).is_err());
    }

    proptest! {
        #[test]
        fn mask_and_inverse_sum_to_features(
            h in 1usize..4, w in 1usize..4, c in 1usize..4,
            seed in prop::collection::vec(-10.0f32..10.0, 64),
            mask in prop::collection::vec(0.0f32..=1.0, 16),
        ) {
            let f = Tensor::new(vec![h, w, c], seed[..h * w * c].to_vec()).unwrap();
            let a = Tensor::new(vec![h, w], mask[..h * w].to_vec()).unwrap();
            let fa = weight_features(&f, &a, false).unwrap();
            let fi = weight_features(&f, &a, true).unwrap();
            for ((x, y), z) in fa.data().iter().zip(fi.data()).zip(f.data()) {
                prop_assert!((x + y - z).abs() <= 1e-5 * (1.0 + z.abs()));
            }
        }
    }
}
