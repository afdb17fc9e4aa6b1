use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::invalid(format!("empty box ({x0},{y0},{x1},{y1})")));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x1 <= width && self.y1 <= height
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0));
    let iy = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0));
    let inter = ix * iy;
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Component {
    pub bbox: BBox,
    pub area: usize,
}

/// Connected components of a row-major boolean grid, sorted by area
/// (descending), ties broken by first pixel in scan order.
pub fn connected_components(mask: &[bool], width: usize, height: usize, connectivity: Connectivity) -> Vec<Component> {
    debug_assert_eq!(mask.len(), width * height);
    let mut seen = vec![false; mask.len()];
    let mut stack = Vec::new();
    let mut comps = Vec::new();
    let neighbours: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)],
    };
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % width, i / width);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            for (dx, dy) in neighbours {
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        comps.push(Component {
            bbox: BBox { x0, y0, x1, y1 },
            area,
        });
    }
    // stable sort keeps scan order among equal areas
    comps.sort_by(|a, b| b.area.cmp(&a.area));
    comps
}

/// Align-corners bilinear resize of a row-major `src_h × src_w` map.
pub fn upsample_bilinear(map: &[f64], src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Result<Vec<f64>> {
    if map.len() != src_h * src_w || src_h == 0 || src_w == 0 {
        return Err(Error::shape("upsample_bilinear", &[map.len()], &[src_h, src_w]));
    }
    if dst_h < src_h || dst_w < src_w {
        return Err(Error::invalid(format!(
            "upsample target {dst_h}x{dst_w} is smaller than source {src_h}x{src_w}"
        )));
    }
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        if src == 1 || dst == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = (pos.floor() as usize).min(src - 2);
        (lo, lo + 1, pos - lo as f64)
    };
    let cols: Vec<_> = (0..dst_w).map(|x| coord(x, src_w, dst_w)).collect();
    let mut out = Vec::with_capacity(dst_h * dst_w);
    for y in 0..dst_h {
        let (y0, y1, fy) = coord(y, src_h, dst_h);
        for &(x0, x1, fx) in &cols {
            let top = map[y0 * src_w + x0] * (1.0 - fx) + map[y0 * src_w + x1] * fx;
            let bottom = map[y1 * src_w + x0] * (1.0 - fx) + map[y1 * src_w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// `(v - min) / (max - min)`; constant maps become zeros.
    #[default]
    MinMax,
    /// `v / max`, negatives kept; a non-positive max gives all zeros.
    Max,
}

pub fn normalize_map(map: &[f64], mode: Normalization) -> Vec<f64> {
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    match mode {
        Normalization::MinMax => {
            let range = hi - lo;
            if range > 0.0 {
                map.iter().map(|v| (v - lo) / range).collect()
            } else {
                vec![0.0; map.len()]
            }
        }
        Normalization::Max => {
            if hi > 0.0 {
                map.iter().map(|v| v / hi).collect()
            } else {
                vec![0.0; map.len()]
            }
        }
    }
}

/// Boxes of the connected components of an already-normalized map at
/// `value > tau`, largest component first.
pub fn boxes_at_threshold(normalized: &[f64], width: usize, height: usize, tau: f64, connectivity: Connectivity) -> Vec<BBox> {
    let mask: Vec<bool> = normalized.iter().map(|&v| v > tau).collect();
    connected_components(&mask, width, height, connectivity)
        .into_iter()
        .map(|c| c.bbox)
        .collect()
}

/// Normalizes `score_map`, binarizes at `> tau` and returns one tight box per
/// connected component, sorted by component area (descending).
pub fn extract_boxes(
    score_map: &[f64],
    width: usize,
    height: usize,
    tau: f64,
    normalization: Normalization,
    connectivity: Connectivity,
) -> Result<Vec<BBox>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("threshold {tau} outside [0, 1]")));
    }
    if score_map.len() != width * height {
        return Err(Error::shape("extract_boxes", &[score_map.len()], &[height, width]));
    }
    let normalized = normalize_map(score_map, normalization);
    Ok(boxes_at_threshold(&normalized, width, height, tau, connectivity))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: usize, y0: usize, x1: usize, y1: usize) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0, 0, 10, 10), &b(0, 0, 10, 10)), 1.0);
        assert!((iou(&b(0, 0, 10, 10), &b(5, 5, 15, 15)) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(&b(0, 0, 2, 2), &b(2, 0, 4, 2)), 0.0);
        assert!(BBox::new(3, 0, 3, 1).is_err());
    }

    #[test]
    fn upsample_examples() {
        let m = [0.0, 1.0, 0.0, 1.0];
        let out = upsample_bilinear(&m, 2, 2, 2, 4).unwrap();
        let third = 1.0 / 3.0;
        let expected = [0.0, third, 2.0 * third, 1.0];
        for row in out.chunks(4) {
            for (a, e) in row.iter().zip(expected) {
                assert!((a - e).abs() < 1e-15);
            }
        }
        assert_eq!(upsample_bilinear(&m, 2, 2, 2, 2).unwrap(), m.to_vec());
        assert_eq!(upsample_bilinear(&[3.5; 6], 2, 3, 7, 9).unwrap(), vec![3.5; 63]);
        assert!(upsample_bilinear(&m, 2, 2, 1, 4).is_err());
    }

    #[test]
    fn extract_two_diagonal_boxes() {
        let m = [0.9, 0.1, 0.2, 0.8];
        let four = extract_boxes(&m, 2, 2, 0.5, Normalization::MinMax, Connectivity::Four).unwrap();
        assert_eq!(four, vec![b(0, 0, 1, 1), b(1, 1, 2, 2)]);
        // diagonal neighbours merge under 8-connectivity
        let eight = extract_boxes(&m, 2, 2, 0.5, Normalization::MinMax, Connectivity::Eight).unwrap();
        assert_eq!(eight, vec![b(0, 0, 2, 2)]);
    }

    #[test]
    fn tau_one_is_empty_and_tau_zero_covers_above_min() {
        let m = [0.3, 0.9, 0.3, 0.3, 0.5, 0.3];
        assert!(extract_boxes(&m, 3, 2, 1.0, Normalization::MinMax, Connectivity::Eight)
            .unwrap()
            .is_empty());
        let boxes = extract_boxes(&m, 3, 2, 0.0, Normalization::MinMax, Connectivity::Eight).unwrap();
        assert_eq!(boxes, vec![b(1, 0, 2, 2)]);
        assert!(extract_boxes(&m, 3, 2, 1.5, Normalization::MinMax, Connectivity::Eight).is_err());
    }

    #[test]
    fn max_normalization_keeps_negatives_below_zero() {
        let n = normalize_map(&[-1.0, 0.5, 1.0], Normalization::Max);
        assert_eq!(n, vec![-1.0, 0.5, 1.0]);
        let n = normalize_map(&[-2.0, 1.0, 2.0], Normalization::Max);
        assert_eq!(n, vec![-1.0, 0.5, 1.0]);
        assert_eq!(normalize_map(&[-1.0, -2.0], Normalization::Max), vec![0.0, 0.0]);
    }

    #[test]
    fn components_sorted_by_area() {
        #[rustfmt::skip]
        let mask = [
            true, false, false, false,
            false, false, true, true,
            false, false, true, true,
        ];
        let c = connected_components(&mask, 4, 3, Connectivity::Four);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].area, 4);
        assert_eq!(c[0].bbox, b(2, 1, 4, 3));
        assert_eq!(c[1].bbox, b(0, 0, 1, 1));
    }
}
