use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mask_boxes, BodyShape, DatasetSpec, LocalizationSample};
use crate::error::{Error, Result};
use crate::eval::BBox;

const MAX_ATTEMPTS: usize = 200;

/// One binary glyph per class, pairwise Hamming distance as large as the
/// grid allows (at least 3 when possible). Never all-on or all-off.
pub fn class_glyphs(num_classes: usize, cells: usize) -> Vec<Vec<bool>> {
    let n = cells * cells;
    let mut candidates: Vec<u64> = (1..(1u64 << n) - 1).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6c79_7068);
    candidates.shuffle(&mut rng);
    for min_dist in (1..=3).rev() {
        let mut chosen: Vec<u64> = Vec::new();
        for &c in &candidates {
            if chosen.iter().all(|&o| (o ^ c).count_ones() >= min_dist) {
                chosen.push(c);
                if chosen.len() == num_classes {
                    return chosen
                        .into_iter()
                        .map(|bits| (0..n).map(|i| bits >> i & 1 == 1).collect())
                        .collect();
                }
            }
        }
    }
    panic!("not enough glyph patterns for {num_classes} classes");
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Smooth background: a coarse random grid, bilinearly upsampled, on top of a
/// uniform tint. Both stay close to grey so saturated colour is left to markers.
fn background(size: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, [f64; 3]) {
    const GRID: usize = 4;
    let level = rng.gen_range(0.1..0.35);
    let tint = [0, 1, 2].map(|_| level + rng.gen_range(-0.05..0.05));
    let coarse: Vec<f64> = (0..GRID * GRID)
        .flat_map(|_| {
            let l = rng.gen_range(-0.12..0.12);
            [0, 1, 2].map(|_| l + rng.gen_range(-0.03..0.03))
        })
        .collect();
    let mut img = vec![0.0; size * size * 3];
    let scale = (GRID - 1) as f64 / (size - 1) as f64;
    for y in 0..size {
        let fy = y as f64 * scale;
        let y0 = (fy.floor() as usize).min(GRID - 2);
        let ty = fy - y0 as f64;
        for x in 0..size {
            let fx = x as f64 * scale;
            let x0 = (fx.floor() as usize).min(GRID - 2);
            let tx = fx - x0 as f64;
            for c in 0..3 {
                let g = |gy: usize, gx: usize| coarse[(gy * GRID + gx) * 3 + c];
                let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
                let bottom = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
                img[(y * size + x) * 3 + c] = tint[c] + top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    (img, tint)
}

/// Low-saturation body colour, brighter than the background tint by at least
/// 0.3, so bodies never share the saturated marker hues.
fn body_colour(tint: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mean = (tint[0] + tint[1] + tint[2]) / 3.0;
    let level = rng.gen_range((mean + 0.3).max(0.6)..0.92);
    [0, 1, 2].map(|_| level + rng.gen_range(-0.06..0.06))
}

/// Fully saturated colour for class `label`, hues evenly spaced.
pub fn class_hue(label: usize, num_classes: usize) -> [f64; 3] {
    let h = 6.0 * label as f64 / num_classes as f64;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Rasterizes a body of the given shape with bounding box `(x0, y0, w, h)`.
fn rasterize(shape: BodyShape, size: usize, x0: f64, y0: f64, w: f64, h: f64, orientation: u8) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    let (cx, cy) = (x0 + w / 2.0, y0 + h / 2.0);
    // triangle vertices for apex up/down/left/right
    let tri = match orientation % 4 {
        0 => [(cx, y0), (x0, y0 + h), (x0 + w, y0 + h)],
        1 => [(cx, y0 + h), (x0 + w, y0), (x0, y0)],
        2 => [(x0, cy), (x0 + w, y0 + h), (x0 + w, y0)],
        _ => [(x0 + w, cy), (x0, y0), (x0, y0 + h)],
    };
    let edge = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = match shape {
                BodyShape::Rectangle => p.0 >= x0 && p.0 < x0 + w && p.1 >= y0 && p.1 < y0 + h,
                BodyShape::Ellipse => {
                    let dx = (p.0 - cx) / (w / 2.0);
                    let dy = (p.1 - cy) / (h / 2.0);
                    dx * dx + dy * dy <= 1.0
                }
                BodyShape::Triangle => {
                    let d = [edge(tri[0], tri[1], p), edge(tri[1], tri[2], p), edge(tri[2], tri[0], p)];
                    d.iter().all(|v| *v >= 0.0) || d.iter().all(|v| *v <= 0.0)
                }
            };
            mask[y * size + x] = inside;
        }
    }
    mask
}

fn area_factor(shape: BodyShape) -> f64 {
    match shape {
        BodyShape::Rectangle => 1.0,
        BodyShape::Ellipse => std::f64::consts::PI / 4.0,
        BodyShape::Triangle => 0.5,
    }
}

/// Top-left corners where an `m × m` square sits inside `mask` with a
/// one-pixel body margin on every side.
fn marker_positions(mask: &[bool], size: usize, m: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if size < m + 2 {
        return out;
    }
    for y in 1..size - m {
        for x in 1..size - m {
            let ok = (y - 1..y + m + 1).all(|yy| (x - 1..x + m + 1).all(|xx| mask[yy * size + xx]));
            if ok {
                out.push((x, y));
            }
        }
    }
    out
}

struct Body {
    mask: Vec<bool>,
}

/// Region `(x0, y0, x1, y1)` in which a body is drawn, inset by one pixel
/// from the image border.
type Region = (f64, f64, f64, f64);

/// Splits the image into `n` strips along a random axis, leaving a gap of
/// three pixels between neighbours.
fn regions(size: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Region> {
    let lo = 1.0;
    let hi = size as f64 - 1.0;
    if n == 1 {
        return vec![(lo, lo, hi, hi)];
    }
    let gap = 3.0;
    let step = (hi - lo - gap * (n - 1) as f64) / n as f64;
    let vertical = rng.gen_bool(0.5);
    (0..n)
        .map(|i| {
            let a = lo + i as f64 * (step + gap);
            if vertical {
                (a, lo, a + step, hi)
            } else {
                (lo, a, hi, a + step)
            }
        })
        .collect()
}

fn sample_body(spec: &DatasetSpec, shapes: &[BodyShape], region: Region, rng: &mut ChaCha8Rng) -> Option<Body> {
    let size = spec.image_size;
    let image_area = (size * size) as f64;
    let shape = *shapes.choose(rng).expect("at least one body shape");
    let target = rng.gen_range(spec.body_area.0..=spec.body_area.1);
    let aspect: f64 = if spec.objects_per_image > 1 {
        rng.gen_range(0.25..4.0)
    } else {
        rng.gen_range(0.75..1.33)
    };
    let box_area = target * image_area / area_factor(shape);
    let w = (box_area * aspect).sqrt();
    let h = box_area / w;
    let (rx0, ry0, rx1, ry1) = region;
    if w > rx1 - rx0 || h > ry1 - ry0 {
        return None;
    }
    let x0 = rng.gen_range(rx0..=rx1 - w);
    let y0 = rng.gen_range(ry0..=ry1 - h);
    let orientation = rng.gen_range(0..4u8);
    let mask = rasterize(shape, size, x0, y0, w, h, orientation);
    let area = mask.iter().filter(|m| **m).count() as f64 / image_area;
    (spec.body_area.0..=spec.body_area.1).contains(&area).then_some(Body { mask })
}

pub(super) fn render_sample(
    spec: &DatasetSpec,
    label: usize,
    glyph: &[bool],
    rng: &mut ChaCha8Rng,
) -> Result<LocalizationSample> {
    let size = spec.image_size;
    let (mut image, tint) = background(size, rng);
    let shapes = spec.shapes_for(label);
    let m = spec.marker_px();
    let mut gt_mask = vec![false; size * size];
    let mut markers = Vec::new();

    for region in regions(size, spec.objects_per_image, rng) {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let Some(body) = sample_body(spec, &shapes, region, rng) else { continue };
            let spots = marker_positions(&body.mask, size, m);
            if let Some(&spot) = spots.choose(rng) {
                placed = Some((body, spot));
                break;
            }
        }
        let (body, (mx, my)) = placed.ok_or_else(|| {
            Error::config(
                "body_area",
                format!("could not place an object with a marker after {MAX_ATTEMPTS} attempts"),
            )
        })?;

        let colour = body_colour(tint, rng);
        let amp = spec.body_texture;
        for (i, &inside) in body.mask.iter().enumerate() {
            if inside {
                let speckle = if amp > 0.0 { rng.gen_range(-amp..amp) } else { 0.0 };
                for c in 0..3 {
                    image[i * 3 + c] = colour[c] + speckle;
                }
                gt_mask[i] = true;
            }
        }
        let cell = spec.marker_cell_px;
        let hue = class_hue(label, spec.num_classes);
        for y in 0..m {
            for x in 0..m {
                let on = glyph[(y / cell) * spec.marker_cells + x / cell];
                let i = (my + y) * size + mx + x;
                for c in 0..3 {
                    image[i * 3 + c] = if on { hue[c] } else { 0.0 };
                }
            }
        }
        markers.push(BBox {
            x0: mx,
            y0: my,
            x1: mx + m,
            y1: my + m,
        });
    }

    let spread = spec.noise_level * 3f64.sqrt();
    for v in image.iter_mut() {
        let noise = if spread > 0.0 { rng.gen_range(-spread..spread) } else { 0.0 };
        *v = quantize(*v + noise);
    }

    let gt_boxes = mask_boxes(&gt_mask, size);
    Ok(LocalizationSample {
        size,
        image,
        label,
        gt_boxes,
        gt_mask,
        markers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_distinct() {
        let g = class_glyphs(8, 3);
        assert_eq!(g.len(), 8);
        for i in 0..8 {
            assert!(g[i].iter().any(|b| *b) && !g[i].iter().all(|b| *b));
            for j in 0..i {
                let d = g[i].iter().zip(&g[j]).filter(|(a, b)| a != b).count();
                assert!(d >= 3);
            }
        }
    }

    #[test]
    fn hues_are_distinct_and_saturated() {
        let hues: Vec<_> = (0..8).map(|c| class_hue(c, 8)).collect();
        assert_eq!(hues[0], [1.0, 0.0, 0.0]);
        for (i, a) in hues.iter().enumerate() {
            assert!(a.iter().any(|v| *v == 1.0) && a.iter().any(|v| *v == 0.0));
            for b in &hues[..i] {
                assert!(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) >= 0.5);
            }
        }
    }

    #[test]
    fn shapes_rasterize_near_target_area() {
        for shape in BodyShape::ALL {
            for orientation in 0..4 {
                let m = rasterize(shape, 64, 10.0, 12.0, 36.0, 30.0, orientation);
                let area = m.iter().filter(|v| **v).count() as f64;
                let expected = 36.0 * 30.0 * area_factor(shape);
                assert!((area - expected).abs() / expected < 0.05, "{shape:?} {area} vs {expected}");
            }
        }
    }
}
