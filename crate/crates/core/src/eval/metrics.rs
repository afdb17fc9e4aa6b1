use serde::{Deserialize, Serialize};

use super::boxes::{boxes_at_threshold, iou, normalize_map, BBox, Connectivity, Normalization};
use crate::error::{Error, Result};

/// A raw (un-normalized) localization map at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// How score maps are turned into boxes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxProtocol {
    pub normalization: Normalization,
    pub connectivity: Connectivity,
}

/// `n` evenly spaced thresholds from 0 to 1 inclusive.
pub fn tau_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

fn best_iou(boxes: &[BBox], gt: &[BBox], multi: bool) -> f64 {
    let candidates = if multi { boxes } else { &boxes[..boxes.len().min(1)] };
    candidates
        .iter()
        .flat_map(|b| gt.iter().map(move |g| iou(b, g)))
        .fold(0.0, f64::max)
}

fn check_aligned(gt: &[Vec<BBox>], maps: &[ScoreMap]) -> Result<()> {
    if gt.len() != maps.len() {
        return Err(Error::invalid(format!(
            "{} ground-truth entries for {} score maps",
            gt.len(),
            maps.len()
        )));
    }
    if maps.iter().any(|m| m.values.len() != m.width * m.height) {
        return Err(Error::invalid("score map size disagrees with its dimensions"));
    }
    Ok(())
}

/// Per-image best IoU at `tau`: the largest component only (`multi = false`)
/// or the best pair over all components and all ground-truth boxes.
fn best_ious_at(gt: &[Vec<BBox>], normalized: &[(usize, usize, Vec<f64>)], tau: f64, multi: bool, conn: Connectivity) -> Vec<f64> {
    normalized
        .iter()
        .zip(gt)
        .map(|((w, h, v), g)| best_iou(&boxes_at_threshold(v, *w, *h, tau, conn), g, multi))
        .collect()
}

fn normalize_all(maps: &[ScoreMap], mode: Normalization) -> Vec<(usize, usize, Vec<f64>)> {
    maps.iter()
        .map(|m| (m.width, m.height, normalize_map(&m.values, mode)))
        .collect()
}

/// Fraction of images whose box at threshold `tau` reaches IoU `delta`.
pub fn box_accuracy(
    gt: &[Vec<BBox>],
    maps: &[ScoreMap],
    tau: f64,
    delta: f64,
    multi: bool,
    protocol: BoxProtocol,
) -> Result<f64> {
    check_aligned(gt, maps)?;
    if maps.is_empty() {
        return Ok(0.0);
    }
    let normalized = normalize_all(maps, protocol.normalization);
    let ious = best_ious_at(gt, &normalized, tau, multi, protocol.connectivity);
    let hits = ious.iter().filter(|&&v| v >= delta).count();
    Ok(hits as f64 / maps.len() as f64)
}

/// Box accuracy as a function of the binarization threshold, one row per δ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub thresholds: Vec<f64>,
    pub deltas: Vec<f64>,
    /// `accuracy[d][t]` for `deltas[d]` and `thresholds[t]`.
    pub accuracy: Vec<Vec<f64>>,
}

impl SweepCurve {
    pub fn max_for(&self, delta_index: usize) -> f64 {
        self.accuracy[delta_index].iter().copied().fold(0.0, f64::max)
    }

    /// Columns `tau, acc@δ...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau");
        for d in &self.deltas {
            out.push_str(&format!(",acc@{d}"));
        }
        out.push('\n');
        for (t, tau) in self.thresholds.iter().enumerate() {
            out.push_str(&format!("{tau:.4}"));
            for row in &self.accuracy {
                out.push_str(&format!(",{:.6}", row[t]));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaxBoxAccV2 {
    pub per_delta: Vec<(f64, f64)>,
    pub mean: f64,
    pub curve: SweepCurve,
}

/// For each δ, the best multi-box accuracy over the threshold grid.
pub fn maxboxaccv2(
    gt: &[Vec<BBox>],
    maps: &[ScoreMap],
    deltas: &[f64],
    tau_grid: &[f64],
    protocol: BoxProtocol,
) -> Result<MaxBoxAccV2> {
    check_aligned(gt, maps)?;
    if tau_grid.is_empty() || tau_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("threshold grid must be non-empty and ascending"));
    }
    if deltas.is_empty() {
        return Err(Error::invalid("at least one IoU threshold is required"));
    }
    let normalized = normalize_all(maps, protocol.normalization);
    let n = maps.len().max(1) as f64;
    let mut accuracy = vec![Vec::with_capacity(tau_grid.len()); deltas.len()];
    for &tau in tau_grid {
        let ious = best_ious_at(gt, &normalized, tau, true, protocol.connectivity);
        for (row, &delta) in accuracy.iter_mut().zip(deltas) {
            row.push(ious.iter().filter(|&&v| v >= delta).count() as f64 / n);
        }
    }
    let curve = SweepCurve {
        thresholds: tau_grid.to_vec(),
        deltas: deltas.to_vec(),
        accuracy,
    };
    let per_delta: Vec<(f64, f64)> = deltas
        .iter()
        .enumerate()
        .map(|(i, &d)| (d, curve.max_for(i)))
        .collect();
    let mean = per_delta.iter().map(|(_, v)| v).sum::<f64>() / per_delta.len() as f64;
    Ok(MaxBoxAccV2 {
        per_delta,
        mean,
        curve,
    })
}

/// Whether `label` is among the `k` largest logits. Ties rank the lower
/// class index first, so a constant output is not rewarded.
pub fn in_top_k(logits: &[f64], label: usize, k: usize) -> bool {
    let target = logits[label];
    let ahead = logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < label))
        .count();
    ahead < k
}

/// `(Top-k Loc, GT Loc)` with the single largest-component box at `tau`.
#[allow(clippy::too_many_arguments)]
pub fn top_k_gt_loc(
    gt: &[Vec<BBox>],
    maps: &[ScoreMap],
    logits: &[Vec<f64>],
    labels: &[usize],
    k: usize,
    delta: f64,
    tau: f64,
    protocol: BoxProtocol,
) -> Result<(f64, f64)> {
    check_aligned(gt, maps)?;
    if logits.len() != maps.len() || labels.len() != maps.len() {
        return Err(Error::invalid("logits and labels must align with score maps"));
    }
    if maps.is_empty() {
        return Ok((0.0, 0.0));
    }
    if let Some(l) = logits.iter().find(|l| k == 0 || k > l.len()) {
        return Err(Error::invalid(format!("k = {k} is invalid for {} classes", l.len())));
    }
    let normalized = normalize_all(maps, protocol.normalization);
    let ious = best_ious_at(gt, &normalized, tau, false, protocol.connectivity);
    let mut loc = 0usize;
    let mut topk = 0usize;
    for ((v, lg), &label) in ious.iter().zip(logits).zip(labels) {
        if *v >= delta {
            loc += 1;
            if in_top_k(lg, label, k) {
                topk += 1;
            }
        }
    }
    let n = maps.len() as f64;
    Ok((topk as f64 / n, loc as f64 / n))
}

/// Pixel-level average precision over all pooled pixels:
/// `Σ (R_i - R_{i-1}) · P_i` over distinct score thresholds, descending.
pub fn pxap(scores: &[Vec<f64>], masks: &[Vec<bool>]) -> Result<f64> {
    if scores.len() != masks.len() || scores.iter().zip(masks).any(|(s, m)| s.len() != m.len()) {
        return Err(Error::invalid("score maps and masks are not pixel-aligned"));
    }
    let mut pixels: Vec<(f64, bool)> = scores
        .iter()
        .zip(masks)
        .flat_map(|(s, m)| s.iter().copied().zip(m.iter().copied()))
        .collect();
    let total_fg = pixels.iter().filter(|p| p.1).count();
    if total_fg == 0 {
        return Err(Error::invalid("no foreground pixels in any mask"));
    }
    if pixels.iter().any(|p| !p.0.is_finite()) {
        return Err(Error::NonFinite { op: "pxap" });
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < pixels.len() {
        let s = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == s {
            if pixels[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_fg as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}
