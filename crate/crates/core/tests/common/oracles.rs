//! Brute-force references for the localization metrics: label propagation
//! instead of flood fill, pixel-counting IoU, per-threshold recounting for
//! PxAP.

use featalign::eval::{BBox, BoxProtocol, Connectivity, Normalization, ScoreMap};


pub fn ref_normalize(v: &[f64], mode: Normalization) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    v.iter()
        .map(|&x| match mode {
            Normalization::MinMax if hi > lo => (x - lo) / (hi - lo),
            Normalization::Max if hi > 0.0 => x / hi,
            _ => 0.0,
        })
        .collect()
}

/// Min-label propagation until a fixed point; returns boxes sorted by area
/// (descending), ties by the component's first pixel.
pub fn ref_components(mask: &[bool], w: usize, h: usize, conn: Connectivity) -> Vec<BBox> {
    let mut label: Vec<usize> = (0..mask.len()).collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !mask[i] {
                    continue;
                }
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if (dx, dy) == (0, 0) || (conn == Connectivity::Four && dx != 0 && dy != 0) {
                            continue;
                        }
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let j = ny as usize * w + nx as usize;
                        if mask[j] && label[j] < label[i] {
                            label[i] = label[j];
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut comps: Vec<(usize, usize, BBox)> = Vec::new();
    for root in 0..mask.len() {
        if !mask[root] || label[root] != root {
            continue;
        }
        let members: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] && label[i] == root).collect();
        let xs = members.iter().map(|i| i % w);
        let ys = members.iter().map(|i| i / w);
        let bbox = BBox {
            x0: xs.clone().min().unwrap(),
            x1: xs.max().unwrap() + 1,
            y0: ys.clone().min().unwrap(),
            y1: ys.max().unwrap() + 1,
        };
        comps.push((members.len(), root, bbox));
    }
    comps.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    comps.into_iter().map(|c| c.2).collect()
}

pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    let xmax = a.x1.max(b.x1);
    let ymax = a.y1.max(b.y1);
    for y in 0..ymax {
        for x in 0..xmax {
            let (ia, ib) = (a.contains(x, y), b.contains(x, y));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    if inter == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn ref_boxes(m: &ScoreMap, tau: f64, p: BoxProtocol) -> Vec<BBox> {
    let n = ref_normalize(&m.values, p.normalization);
    let mask: Vec<bool> = n.iter().map(|&v| v > tau).collect();
    ref_components(&mask, m.width, m.height, p.connectivity)
}

pub fn ref_best_iou(m: &ScoreMap, gt: &[BBox], tau: f64, multi: bool, p: BoxProtocol) -> f64 {
    let boxes = ref_boxes(m, tau, p);
    let take = if multi { boxes.len() } else { boxes.len().min(1) };
    let mut best = 0.0;
    for b in &boxes[..take] {
        for g in gt {
            let v = ref_iou(b, g);
            if v > best {
                best = v;
            }
        }
    }
    best
}

pub fn ref_box_accuracy(gt: &[Vec<BBox>], maps: &[ScoreMap], tau: f64, delta: f64, multi: bool, p: BoxProtocol) -> f64 {
    let hits = maps
        .iter()
        .zip(gt)
        .filter(|(m, g)| ref_best_iou(m, g, tau, multi, p) >= delta)
        .count();
    hits as f64 / maps.len() as f64
}

pub fn ref_pxap(scores: &[Vec<f64>], masks: &[Vec<bool>]) -> f64 {
    let px: Vec<(f64, bool)> = scores.iter().flatten().cloned().zip(masks.iter().flatten().cloned()).collect();
    let fg = px.iter().filter(|p| p.1).count() as f64;
    let mut thresholds: Vec<f64> = px.iter().map(|p| p.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev) = (0.0, 0.0);
    for t in thresholds {
        let tp = px.iter().filter(|p| p.0 >= t && p.1).count() as f64;
        let all = px.iter().filter(|p| p.0 >= t).count() as f64;
        let r = tp / fg;
        ap += (r - prev) * (tp / all);
        prev = r;
    }
    ap
}
