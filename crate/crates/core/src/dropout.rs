//! Attentive dropout over the intermediate feature map `F'`.
//!
//! Locations whose channel-mean activation exceeds `gamma · max` form the
//! attentive set; each of them is dropped (zeroed across every channel)
//! independently with probability `p`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Spatial keep/drop grid for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DropMask {
    pub height: usize,
    pub width: usize,
    /// Row-major, `true` = keep.
    pub keep: Vec<bool>,
    /// Row-major attentive set the mask was drawn from.
    pub attentive: Vec<bool>,
    pub gamma: f64,
    pub p: f64,
    /// `(seed, word position)` of the generator before sampling.
    pub seed_state: ([u8; 32], u128),
}

impl DropMask {
    pub fn keep_all(height: usize, width: usize) -> Self {
        DropMask {
            height,
            width,
            keep: vec![true; height * width],
            attentive: vec![false; height * width],
            gamma: 1.0,
            p: 0.0,
            seed_state: ([0; 32], 0),
        }
    }

    pub fn dropped_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }
}

/// Per-location mean over channels of a `[D,H,W]` slice.
pub fn channel_mean(values: &[f64], shape: &[usize]) -> Result<Vec<f64>> {
    if shape.len() != 3 || shape.iter().product::<usize>() != values.len() {
        return Err(Error::shape("channel_mean", shape, &[values.len()]));
    }
    let (d, plane) = (shape[0], shape[1] * shape[2]);
    let mut out = vec![0.0; plane];
    for ch in values.chunks_exact(plane) {
        out.iter_mut().zip(ch).for_each(|(a, v)| *a += v);
    }
    out.iter_mut().for_each(|v| *v /= d as f64);
    Ok(out)
}

/// Locations with `attn[u] > gamma · max(attn)`. An all-zero (or
/// non-positive) map has an empty attentive set.
pub fn attentive_set(attn: &[f64], gamma: f64) -> Vec<bool> {
    let max = attn.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return vec![false; attn.len()];
    }
    let threshold = gamma * max;
    attn.iter().map(|&a| a > threshold).collect()
}

pub fn make_mask(
    attn: &[f64],
    height: usize,
    width: usize,
    gamma: f64,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DropMask> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("p must lie in [0, 1], got {p}")));
    }
    if attn.len() != height * width {
        return Err(Error::shape("make_mask", &[attn.len()], &[height, width]));
    }
    let seed_state = (rng.get_seed(), rng.get_word_pos());
    let attentive = attentive_set(attn, gamma);
    let keep = attentive
        .iter()
        .map(|&hot| !(hot && rng.gen_bool(p)))
        .collect();
    Ok(DropMask {
        height,
        width,
        keep,
        attentive,
        gamma,
        p,
        seed_state,
    })
}

/// Records `F'_drop` on the tape. The mask is a constant.
pub fn apply_mask(tape: &mut Tape, f_prime: Var, mask: &DropMask) -> Result<Var> {
    let shape = tape.shape(f_prime);
    if shape.len() != 3 || shape[1] != mask.height || shape[2] != mask.width {
        return Err(Error::shape(
            "apply_mask",
            shape,
            &[mask.height, mask.width],
        ));
    }
    tape.spatial_mask(f_prime, &mask.keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn threshold_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = make_mask(&[1.0, 0.9, 0.5], 1, 3, 0.8, 1.0, &mut rng).unwrap();
        assert_eq!(m.attentive, vec![true, true, false]);
        assert_eq!(m.keep, vec![false, false, true]);
    }

    #[test]
    fn p_zero_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = make_mask(&[3.0, 2.0, 9.0, 0.1], 2, 2, 0.1, 0.0, &mut rng).unwrap();
        assert!(m.keep.iter().all(|&k| k));
    }

    #[test]
    fn zero_map_has_empty_attentive_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = make_mask(&[0.0; 4], 2, 2, 0.8, 1.0, &mut rng).unwrap();
        assert!(m.attentive.iter().all(|&a| !a));
        assert!(m.keep.iter().all(|&k| k));
    }

    #[test]
    fn tie_at_threshold_is_not_attentive() {
        assert_eq!(attentive_set(&[1.0, 0.5], 0.5), vec![true, false]);
    }

    #[test]
    fn bad_hyperparameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(make_mask(&[1.0], 1, 1, 0.0, 0.5, &mut rng).is_err());
        assert!(make_mask(&[1.0], 1, 1, 0.5, 1.5, &mut rng).is_err());
        assert!(make_mask(&[1.0], 1, 2, 0.5, 0.5, &mut rng).is_err());
    }

    #[test]
    fn channel_mean_examples() {
        assert_eq!(channel_mean(&[1.0, 3.0], &[2, 1, 1]).unwrap(), vec![2.0]);
        assert_eq!(channel_mean(&[4.0; 12], &[3, 2, 2]).unwrap(), vec![4.0; 4]);
    }

    #[test]
    fn single_drop_zeroes_all_channels() {
        let mut tape = Tape::new();
        let x = tape.constant(crate::Tensor::full(&[3, 1, 2], 2.0));
        let mut mask = DropMask::keep_all(1, 2);
        mask.keep[1] = false;
        let y = apply_mask(&mut tape, x, &mask).unwrap();
        assert_eq!(tape.value(y), &[2.0, 0.0, 2.0, 0.0, 2.0, 0.0]);
        let bad = DropMask::keep_all(2, 2);
        assert!(apply_mask(&mut tape, x, &bad).is_err());
    }
}
