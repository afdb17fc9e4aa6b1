//! CAM decomposition.
//!
//! For class weight `w_c` and feature map `F`, the CAM at location `u`
//! factors as `‖w_c‖ · ‖F_u‖ · cos(w_c, F_u)`. The norm map 𝓕 and the
//! similarity map 𝓢 are exposed separately, together with the min-max
//! normalized norm map F̂ used for region partitioning.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// 𝓕: `[D,H,W] -> [H,W]`, per-location feature norm.
pub fn norm_map(tape: &mut Tape, f_map: Var) -> Result<Var> {
    tape.norm_map(f_map)
}

/// 𝓢: `[D,H,W] -> [H,W]`, cosine similarity to `w_c` (0 where `F_u = 0`).
pub fn similarity_map(tape: &mut Tape, f_map: Var, w_c: Var) -> Result<Var> {
    tape.similarity_map(f_map, w_c)
}

/// F̂ with detached extrema; constant maps become zeros.
pub fn minmax_normalize(tape: &mut Tape, map: Var) -> Var {
    tape.minmax_normalize(map)
}

/// `cam_u = w_c · F_u`.
pub fn compute_cam(tape: &mut Tape, f_map: Var, w_c: Var) -> Result<Var> {
    tape.channel_dot(f_map, w_c)
}

/// Cosine similarity of two equal-length vectors; 0 if either is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// All decomposition maps for one image and class, at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionMaps {
    pub height: usize,
    pub width: usize,
    pub norm_map: Vec<f64>,
    pub sim_map: Vec<f64>,
    pub norm_hat: Vec<f64>,
    pub cam: Vec<f64>,
    pub class_index: usize,
    pub weight_norm: f64,
}

impl DecompositionMaps {
    /// `‖w_c‖ · 𝓕_u · 𝓢_u` at every location.
    pub fn recombined(&self) -> Vec<f64> {
        self.norm_map
            .iter()
            .zip(&self.sim_map)
            .map(|(n, s)| self.weight_norm * n * s)
            .collect()
    }

    pub fn as_tensors(&self) -> [(&'static str, Tensor); 4] {
        let shape = vec![self.height, self.width];
        let t = |v: &Vec<f64>| Tensor::new(shape.clone(), v.clone()).expect("map shape");
        [
            ("norm", t(&self.norm_map)),
            ("sim", t(&self.sim_map)),
            ("norm_hat", t(&self.norm_hat)),
            ("cam", t(&self.cam)),
        ]
    }
}

/// Decomposes the CAM of `class_index` given `f_map: [D,H,W]` and `w_c: [D]`.
pub fn decompose(f_map: &Tensor, w_c: &[f64], class_index: usize) -> Result<DecompositionMaps> {
    let shape = f_map.shape();
    if shape.len() != 3 || shape[0] != w_c.len() {
        return Err(Error::shape("decompose", shape, &[w_c.len()]));
    }
    let mut tape = Tape::new();
    let f = tape.constant(f_map.clone());
    let w = tape.constant(Tensor::from_vec(w_c.to_vec())?);
    let norm = norm_map(&mut tape, f)?;
    let sim = similarity_map(&mut tape, f, w)?;
    let norm_hat = minmax_normalize(&mut tape, norm);
    let cam = compute_cam(&mut tape, f, w)?;
    Ok(DecompositionMaps {
        height: shape[1],
        width: shape[2],
        norm_map: tape.value(norm).to_vec(),
        sim_map: tape.value(sim).to_vec(),
        norm_hat: tape.value(norm_hat).to_vec(),
        cam: tape.value(cam).to_vec(),
        class_index,
        weight_norm: w_c.iter().map(|v| v * v).sum::<f64>().sqrt(),
    })
}

/// Similarity maps for every class: `[C, H, W]` flattened row-major.
pub fn similarity_all_classes(f_map: &Tensor, weights: &Tensor) -> Result<Vec<f64>> {
    let shape = f_map.shape();
    let wshape = weights.shape();
    if shape.len() != 3 || wshape.len() != 2 || wshape[1] != shape[0] {
        return Err(Error::shape("similarity_all_classes", shape, wshape));
    }
    let mut tape = Tape::new();
    let f = tape.constant(f_map.clone());
    let mut out = Vec::with_capacity(wshape[0] * shape[1] * shape[2]);
    for row in weights.data().chunks_exact(wshape[1]) {
        let w = tape.constant(Tensor::from_vec(row.to_vec())?);
        let s = similarity_map(&mut tape, f, w)?;
        out.extend_from_slice(tape.value(s));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_location(f: &[f64], w: &[f64]) -> DecompositionMaps {
        let fm = Tensor::new(vec![f.len(), 1, 1], f.to_vec()).unwrap();
        decompose(&fm, w, 0).unwrap()
    }

    #[test]
    fn hand_examples() {
        let d = single_location(&[3.0, 4.0], &[3.0, 4.0]);
        assert_eq!(d.norm_map, vec![5.0]);
        assert!((d.sim_map[0] - 1.0).abs() < 1e-15);
        assert_eq!(d.cam, vec![25.0]);
        assert!((d.recombined()[0] - 25.0).abs() < 1e-12);

        assert_eq!(single_location(&[1.0, 0.0], &[0.0, 1.0]).sim_map, vec![0.0]);
        assert_eq!(single_location(&[1.0, 0.0], &[-2.0, 0.0]).sim_map, vec![-1.0]);
        assert_eq!(single_location(&[0.0, 0.0], &[1.0, 1.0]).norm_map, vec![0.0]);
        assert_eq!(single_location(&[0.0, 0.0], &[1.0, 1.0]).sim_map, vec![0.0]);
    }

    #[test]
    fn zero_weight_vector() {
        let fm = Tensor::full(&[2, 2, 2], 1.0);
        assert!(decompose(&fm, &[0.0, 0.0], 0).is_err());
        let mut tape = Tape::new();
        let f = tape.constant(fm);
        let w = tape.constant(Tensor::zeros(&[2]));
        let cam = compute_cam(&mut tape, f, w).unwrap();
        assert_eq!(tape.value(cam), &[0.0; 4]);
    }

    #[test]
    fn minmax_examples() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_vec(vec![2.0, 4.0, 6.0]).unwrap());
        let n = minmax_normalize(&mut tape, v);
        assert_eq!(tape.value(n), &[0.0, 0.5, 1.0]);
        let c = tape.constant(Tensor::from_vec(vec![5.0; 3]).unwrap());
        let n = minmax_normalize(&mut tape, c);
        assert_eq!(tape.value(n), &[0.0; 3]);
    }

    #[test]
    fn dominant_location_wins_cam() {
        // channel 0 everywhere small, one location large and aligned with w
        let mut data = vec![0.1; 2 * 9];
        data[4] = 5.0;
        data[9 + 4] = 5.0;
        let fm = Tensor::new(vec![2, 3, 3], data).unwrap();
        let d = decompose(&fm, &[1.0, 1.0], 0).unwrap();
        let argmax = d
            .cam
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 4);
    }

    #[test]
    fn shape_mismatch() {
        let fm = Tensor::full(&[3, 2, 2], 1.0);
        assert!(decompose(&fm, &[1.0, 1.0], 0).is_err());
    }
}
