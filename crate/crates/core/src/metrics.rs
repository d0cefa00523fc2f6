//! Attention accuracy against boxes, and group accuracy.
//!
//! Grids are flat row-major slices; callers check that shapes agree.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Binary `rows x cols` mask of the cells whose centers lie inside the
/// normalized box `[x0, y0, x1, y1]`. Rows run along `y`.
pub fn rasterize_bbox(bbox: [f64; 4], rows: usize, cols: usize) -> Result<Vec<f64>> {
    let [x0, y0, x1, y1] = bbox;
    if !(bbox.iter().all(|v| (0.0..=1.0).contains(v)) && x0 < x1 && y0 < y1) {
        return Err(Error::InvalidParameter(format!("bbox {bbox:?} is not a normalized rectangle")));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let cy = (r as f64 + 0.5) / rows as f64;
        for c in 0..cols {
            let cx = (c as f64 + 0.5) / cols as f64;
            let inside = cx >= x0 && cx <= x1 && cy >= y0 && cy <= y1;
            out.push(if inside { 1.0 } else { 0.0 });
        }
    }
    Ok(out)
}

fn same_len(m: &[f64], b: &[f64]) -> Result<()> {
    if m.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("map has {} cells, box mask has {}", m.len(), b.len())));
    }
    Ok(())
}

/// `sum min(M, B) / sum max(M, B)`, zero when the denominator is zero.
pub fn soft_iou(m: &[f64], b: &[f64]) -> Result<f64> {
    same_len(m, b)?;
    let (mut lo, mut hi) = (0.0, 0.0);
    for (x, y) in m.iter().zip(b) {
        lo += x.min(*y);
        hi += x.max(*y);
    }
    Ok(if hi > 0.0 { lo / hi } else { 0.0 })
}

/// `IoU(own) / (IoU(own) + max_k IoU(competitor_k))`, zero when the
/// denominator is zero.
pub fn aiou(own: &[f64], b: &[f64], competitors: &[&[f64]]) -> Result<f64> {
    let iou = soft_iou(own, b)?;
    let mut rival: f64 = 0.0;
    for c in competitors {
        rival = rival.max(soft_iou(c, b)?);
    }
    let denom = iou + rival;
    Ok(if denom > 0.0 { iou / denom } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub size: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub groups: BTreeMap<usize, GroupStat>,
    /// Lowest per-group accuracy.
    pub worst: f64,
    /// Accuracy over all instances.
    pub average: f64,
}

impl GroupReport {
    /// Aligned plain-text table, one line per group plus a summary.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>8}  {:>8}  {:>9}", "group", "size", "accuracy");
        for (g, s) in &self.groups {
            let _ = writeln!(out, "{g:>8}  {:>8}  {:>9.4}", s.size, s.accuracy);
        }
        let _ = writeln!(out, "{:>8}  {:>8}  {:>9.4}", "worst", "", self.worst);
        let _ = writeln!(
            out,
            "{:>8}  {:>8}  {:>9.4}",
            "average",
            self.groups.values().map(|s| s.size).sum::<usize>(),
            self.average
        );
        out
    }
}

pub fn group_accuracy(predictions: &[usize], labels: &[usize], groups: &[usize]) -> Result<GroupReport> {
    if predictions.len() != labels.len() || labels.len() != groups.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions, {} labels, {} groups",
            predictions.len(),
            labels.len(),
            groups.len()
        )));
    }
    if groups.is_empty() {
        return Err(Error::InvalidParameter("no groups to evaluate".into()));
    }
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for ((p, l), g) in predictions.iter().zip(labels).zip(groups) {
        let t = tally.entry(*g).or_default();
        t.0 += 1;
        if p == l {
            t.1 += 1;
            correct += 1;
        }
    }
    let groups: BTreeMap<usize, GroupStat> =
        tally.into_iter().map(|(g, (n, c))| (g, GroupStat { size: n, accuracy: c as f64 / n as f64 })).collect();
    let worst = groups.values().map(|s| s.accuracy).fold(f64::INFINITY, f64::min);
    Ok(GroupReport { groups, worst, average: correct as f64 / predictions.len() as f64 })
}
