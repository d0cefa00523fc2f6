//! Multinomial logistic regression for retraining the last layer.
//!
//! The head starts at zero and takes full-batch gradient steps on the mean
//! cross-entropy plus `l2 / 2 * |W|^2` (the bias is not penalized). A step
//! that would raise the loss is retried with half the learning rate.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::embed::sort_by_id;
use crate::linalg::{dot, Matrix};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub l2: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { l2: 1e-3, epochs: 500, lr: 0.5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    /// `class_count x C`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub l2: f64,
    pub seed: u64,
}

impl LinearHead {
    pub fn zeros(class_count: usize, channels: usize) -> Self {
        Self { weights: Matrix::zeros(class_count, channels), bias: alloc::vec![0.0; class_count], l2: 0.0, seed: 0 }
    }

    pub fn class_count(&self) -> usize {
        self.bias.len()
    }

    pub fn channels(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights.iter_rows().zip(&self.bias).map(|(w, b)| dot(w, x) + b).collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    /// Argmax of the logits, ties to the lowest class.
    pub fn predict_one(&self, x: &[f64]) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for (k, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = k;
            }
        }
        best
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| libm::exp(v - max)).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Gradient of the fit objective, returned as `(loss, dW, db)`.
pub fn loss_and_grad(head: &LinearHead, x: &Matrix, labels: &[usize], l2: f64) -> (f64, Matrix, Vec<f64>) {
    let (k, c) = (head.class_count(), head.channels());
    let mut gw = Matrix::zeros(k, c);
    let mut gb = alloc::vec![0.0; k];
    let mut loss = 0.0;
    let inv_n = 1.0 / x.rows() as f64;
    for (row, &label) in x.iter_rows().zip(labels) {
        let z = head.logits(row);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(z.iter().map(|v| libm::exp(v - max)).sum::<f64>());
        loss += lse - z[label];
        for (cls, zc) in z.iter().enumerate() {
            let g = (libm::exp(zc - lse) - f64::from(u8::from(cls == label))) * inv_n;
            gb[cls] += g;
            for (gwv, xv) in gw.row_mut(cls).iter_mut().zip(row) {
                *gwv += g * xv;
            }
        }
    }
    let w = head.weights.as_slice();
    let penalty = 0.5 * l2 * dot(w, w);
    let gw =
        Matrix::from_vec(k, c, gw.as_slice().iter().zip(w).map(|(g, wv)| g + l2 * wv).collect()).expect("same shape");
    (loss * inv_n + penalty, gw, gb)
}

/// Fits a head on `(ids[i], features.row(i), labels[i])`. Rows are sorted by
/// id first, so the result does not depend on input order.
pub fn fit_linear(
    ids: &[String],
    features: &Matrix,
    labels: &[usize],
    class_count: usize,
    cfg: &FitConfig,
) -> Result<LinearHead> {
    if ids.is_empty() {
        return Err(Error::InvalidParameter("training subset is empty".into()));
    }
    if ids.len() != features.rows() || ids.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} ids, {} feature rows and {} labels",
            ids.len(),
            features.rows(),
            labels.len()
        )));
    }
    if class_count < 2 {
        return Err(Error::InvalidParameter(format!("need at least two classes, got {class_count}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(Error::InvalidParameter(format!("label {bad} outside 0..{class_count}")));
    }
    if !(cfg.lr > 0.0 && cfg.l2 >= 0.0) {
        return Err(Error::InvalidParameter("learning rate must be positive and l2 nonnegative".into()));
    }
    if !features.is_finite() {
        return Err(Error::InvalidParameter("features are not finite".into()));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::SingleClass(labels[0]));
    }

    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    let (_, x) = sort_by_id(ids.to_vec(), features)?;
    let y: Vec<usize> = order.iter().map(|&i| labels[i]).collect();

    let mut head = LinearHead::zeros(class_count, features.cols());
    head.l2 = cfg.l2;
    head.seed = cfg.seed;
    let mut lr = cfg.lr;
    let (mut loss, mut gw, mut gb) = loss_and_grad(&head, &x, &y, cfg.l2);
    for epoch in 0..cfg.epochs {
        let mut accepted = false;
        for _ in 0..60 {
            let mut next = head.clone();
            next.weights = Matrix::from_vec(
                class_count,
                features.cols(),
                head.weights.as_slice().iter().zip(gw.as_slice()).map(|(w, g)| w - lr * g).collect(),
            )?;
            next.bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= lr * g);
            let (l, ngw, ngb) = loss_and_grad(&next, &x, &y, cfg.l2);
            if !l.is_finite() {
                return Err(Error::Divergence { step: epoch });
            }
            if l <= loss {
                head = next;
                loss = l;
                gw = ngw;
                gb = ngb;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            // No descent direction left at machine precision.
            break;
        }
    }
    Ok(head)
}

/// Predicted class per id.
pub fn predict(head: &LinearHead, ids: &[String], features: &Matrix) -> Result<BTreeMap<String, usize>> {
    if ids.len() != features.rows() {
        return Err(Error::ShapeMismatch(format!("{} ids for {} rows", ids.len(), features.rows())));
    }
    if features.cols() != head.channels() {
        return Err(Error::ShapeMismatch(format!(
            "features have {} channels, head expects {}",
            features.cols(),
            head.channels()
        )));
    }
    let mut out = BTreeMap::new();
    for (id, row) in ids.iter().zip(features.iter_rows()) {
        if out.insert(id.clone(), head.predict_one(row)).is_some() {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("r{i:03}")).collect()
    }

    #[test]
    fn separable_pair_is_fit_exactly() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let head = fit_linear(&ids(2), &x, &[1, 0], 2, &FitConfig::default()).unwrap();
        let p = predict(&head, &ids(2), &x).unwrap();
        assert_eq!(p["r000"], 1);
        assert_eq!(p["r001"], 0);
    }

    #[test]
    fn zero_head_is_uniform_and_predicts_class_zero() {
        let head = LinearHead::zeros(3, 2);
        for p in head.probabilities(&[0.4, -2.0]) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(head.predict_one(&[5.0, 5.0]), 0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = crate::rng::stream(1, 0);
        let x = Matrix::from_vec(5, 3, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels = [0, 1, 2, 1, 0];
        let mut head = LinearHead::zeros(3, 3);
        head.weights = Matrix::from_vec(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        head.bias = vec![0.1, -0.2, 0.3];
        let l2 = 0.05;
        let (_, gw, gb) = loss_and_grad(&head, &x, &labels, l2);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        for k in 0..9 {
            let at = |delta: f64| {
                let mut p = head.clone();
                let mut w = p.weights.as_slice().to_vec();
                w[k] += delta;
                p.weights = Matrix::from_vec(3, 3, w).unwrap();
                loss_and_grad(&p, &x, &labels, l2).0
            };
            worst = worst.max(rel((at(h) - at(-h)) / (2.0 * h), gw.as_slice()[k]));
        }
        for (k, &g) in gb.iter().enumerate() {
            let at = |delta: f64| {
                let mut p = head.clone();
                p.bias[k] += delta;
                loss_and_grad(&p, &x, &labels, l2).0
            };
            worst = worst.max(rel((at(h) - at(-h)) / (2.0 * h), g));
        }
        assert!(worst < 1e-4, "relative error {worst}");
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        assert_eq!(fit_linear(&ids(2), &x, &[1, 1], 2, &FitConfig::default()), Err(Error::SingleClass(1)));
    }

    #[test]
    fn input_order_does_not_matter() {
        let x = Matrix::from_rows(&[[1.0, 0.2], [-1.0, 0.1], [0.3, -0.7], [-0.2, 0.9]]).unwrap();
        let labels = [1, 0, 1, 0];
        let a = fit_linear(&ids(4), &x, &labels, 2, &FitConfig::default()).unwrap();
        let rev = [3, 2, 1, 0];
        let rids: Vec<String> = rev.iter().map(|&i| ids(4)[i].clone()).collect();
        let rl: Vec<usize> = rev.iter().map(|&i| labels[i]).collect();
        let b = fit_linear(&rids, &x.select_rows(&rev), &rl, 2, &FitConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(predict(&a, &ids(4), &x).unwrap(), predict(&a, &rids, &x.select_rows(&rev)).unwrap());
    }

    #[test]
    fn loss_never_rises() {
        let mut rng = crate::rng::stream(2, 0);
        let x = Matrix::from_vec(40, 4, (0..160).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let mut last = f64::INFINITY;
        for epochs in [0, 1, 5, 20, 80] {
            let cfg = FitConfig { epochs, lr: 5.0, ..Default::default() };
            let head = fit_linear(&ids(40), &x, &labels, 3, &cfg).unwrap();
            let loss = loss_and_grad(&head, &x, &labels, cfg.l2).0;
            assert!(loss <= last + 1e-12);
            last = loss;
        }
    }
}
