use serde::{Deserialize, Serialize};

use super::boxes::BBox;
use crate::cam::DecompositionMaps;
use crate::error::{Error, Result};

/// Equal-width histogram over `[low, high]`; the top edge falls in the last bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub low: f64,
    pub high: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(low: f64, high: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(high > low) {
            return Err(Error::invalid(format!("bad histogram range [{low}, {high}] with {bins} bins")));
        }
        Ok(Histogram {
            low,
            high,
            counts: vec![0; bins],
        })
    }

    pub fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let t = ((v - self.low) / (self.high - self.low) * bins as f64).floor();
        let idx = if t < 0.0 { 0 } else { (t as usize).min(bins - 1) };
        self.counts[idx] += 1;
    }

    pub fn merge(&mut self, other: &Histogram) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = (self.high - self.low) / self.counts.len() as f64;
        (self.low + w * i as f64, self.low + w * (i + 1) as f64)
    }

    /// Columns `bin_low, bin_high, count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.bin_edges(i);
            out.push_str(&format!("{lo:.4},{hi:.4},{c}\n"));
        }
        out
    }
}

/// Feature-grid locations whose centre (mapped to pixels) lies in any box.
pub fn locations_in_boxes(feat_h: usize, feat_w: usize, image_size: usize, boxes: &[BBox]) -> Vec<bool> {
    let (sy, sx) = (image_size as f64 / feat_h as f64, image_size as f64 / feat_w as f64);
    let mut out = Vec::with_capacity(feat_h * feat_w);
    for i in 0..feat_h {
        for j in 0..feat_w {
            let y = ((i as f64 + 0.5) * sy).floor() as usize;
            let x = ((j as f64 + 0.5) * sx).floor() as usize;
            out.push(boxes.iter().any(|b| b.contains(x, y)));
        }
    }
    out
}

/// Feature-grid locations whose centre pixel is foreground in `mask`.
pub fn locations_in_mask(feat_h: usize, feat_w: usize, image_size: usize, mask: &[bool]) -> Vec<bool> {
    let (sy, sx) = (image_size as f64 / feat_h as f64, image_size as f64 / feat_w as f64);
    let mut out = Vec::with_capacity(feat_h * feat_w);
    for i in 0..feat_h {
        for j in 0..feat_w {
            let y = ((i as f64 + 0.5) * sy).floor() as usize;
            let x = ((j as f64 + 0.5) * sx).floor() as usize;
            out.push(mask[y * image_size + x]);
        }
    }
    out
}

/// Histograms of 𝓢 (over `[-1, 1]`) and F̂ (over `[0, 1]`) restricted to
/// feature locations inside the ground-truth boxes.
pub fn region_histograms(
    decomp: &DecompositionMaps,
    gt_boxes: &[BBox],
    image_size: usize,
    bins: usize,
) -> Result<(Histogram, Histogram)> {
    let mut sim = Histogram::new(-1.0, 1.0, bins)?;
    let mut norm = Histogram::new(0.0, 1.0, bins)?;
    let inside = locations_in_boxes(decomp.height, decomp.width, image_size, gt_boxes);
    for (u, &hit) in inside.iter().enumerate() {
        if hit {
            sim.add(decomp.sim_map[u]);
            norm.add(decomp.norm_hat[u]);
        }
    }
    Ok((sim, norm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps(sim: Vec<f64>, norm_hat: Vec<f64>) -> DecompositionMaps {
        DecompositionMaps {
            height: 2,
            width: 2,
            norm_map: vec![1.0; 4],
            sim_map: sim,
            norm_hat,
            cam: vec![0.0; 4],
            class_index: 0,
            weight_norm: 1.0,
        }
    }

    #[test]
    fn constant_similarity_single_bin() {
        let d = maps(vec![0.5; 4], vec![0.0, 0.2, 0.9, 1.0]);
        let full = BBox::new(0, 0, 8, 8).unwrap();
        let (s, n) = region_histograms(&d, &[full], 8, 10).unwrap();
        assert_eq!(s.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(s.counts[7], 4);
        assert_eq!(n.total(), 4);
        assert_eq!(n.counts[9], 2, "0.9 and the top edge 1.0 share the last bin");
    }

    #[test]
    fn only_in_box_locations_are_counted() {
        let d = maps(vec![-1.0, 0.0, 0.3, 1.0], vec![0.0; 4]);
        // covers the top-left feature cell (centre pixel (2,2)) only
        let b = BBox::new(0, 0, 4, 4).unwrap();
        let (s, _) = region_histograms(&d, &[b], 8, 4).unwrap();
        assert_eq!(s.total(), 1);
        assert_eq!(s.counts[0], 1);
    }

    #[test]
    fn csv_layout() {
        let mut h = Histogram::new(0.0, 1.0, 2).unwrap();
        h.add(0.25);
        assert_eq!(h.to_csv(), "bin_low,bin_high,count\n0.0000,0.5000,1\n0.5000,1.0000,0\n");
    }
}
