//! Seeded fixtures shared by the criterion benches.

use featalign::eval::{BBox, ScoreMap};
use featalign::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// Smooth blob-shaped score maps with one ground-truth box each.
pub fn localization_batch(n: usize, size: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<BBox>>, Vec<ScoreMap>) {
    let mut gt = Vec::with_capacity(n);
    let mut maps = Vec::with_capacity(n);
    for _ in 0..n {
        let w = rng.gen_range(size / 4..size / 2);
        let h = rng.gen_range(size / 4..size / 2);
        let x0 = rng.gen_range(0..size - w);
        let y0 = rng.gen_range(0..size - h);
        gt.push(vec![BBox::new(x0, y0, x0 + w, y0 + h).expect("ordered corners")]);
        let (cx, cy) = (x0 as f64 + w as f64 / 2.0, y0 as f64 + h as f64 / 2.0);
        let s = (w.max(h) as f64) / 2.0;
        let values = (0..size * size)
            .map(|i| {
                let (x, y) = ((i % size) as f64, (i / size) as f64);
                let d2 = ((x - cx).powi(2) + (y - cy).powi(2)) / (s * s);
                (-d2).exp() + 0.05 * rng.gen::<f64>()
            })
            .collect();
        maps.push(ScoreMap {
            width: size,
            height: size,
            values,
        });
    }
    (gt, maps)
}
