//! Per-sample training objective: cross-entropy plus the dropout
//! consistency, similarity and norm terms.

use rand_chacha::ChaCha8Rng;

use crate::cam::{norm_map, similarity_all_classes, similarity_map};
use crate::dropout::{channel_mean, make_mask, DropMask};
use crate::error::Result;
use crate::losses::{
    loss_drop, loss_norm, loss_sim, partition_by_norm, partition_by_similarity, partition_by_similarity_finegrained,
    total_loss, warm_loss, LossWeights, RegionPartition, Stage,
};
use crate::model::{BoundParams, Model};
use crate::tensor::{extrema, Tape, Tensor, Var};

/// Non-differentiable choices made during one evaluation of the objective.
/// Empty fields are filled from the current values; filled ones are reused,
/// which is how a gradient check pins them at the base point.
#[derive(Clone, Debug, Default)]
pub struct Frozen {
    pub mask: Option<DropMask>,
    pub norm_extrema: Option<(f64, f64)>,
    pub norm_partition: Option<RegionPartition>,
    pub sim_partition: Option<RegionPartition>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub drop: Option<Var>,
    pub sim: Option<Var>,
    pub norm: Option<Var>,
    pub logits: Var,
}

impl LossTerms {
    /// Scalar values `(ce, sim, norm, drop)`; inactive terms read as 0.
    pub fn values(&self, tape: &Tape) -> [f64; 4] {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
        [tape.scalar(self.ce), get(self.sim), get(self.norm), get(self.drop)]
    }
}

#[allow(clippy::too_many_arguments)]
pub fn sample_objective(
    model: &Model,
    tape: &mut Tape,
    bound: &BoundParams,
    image: Var,
    label: usize,
    stage: Stage,
    weights: &LossWeights,
    frozen: &mut Frozen,
    rng: &mut ChaCha8Rng,
) -> Result<LossTerms> {
    let fwd = model.forward(tape, bound, image)?;
    let ce = tape.cross_entropy(fwd.logits, label)?;

    let drop = if weights.lambda_drop > 0.0 {
        if frozen.mask.is_none() {
            let shape = tape.shape(fwd.f_prime).to_vec();
            let attn = channel_mean(tape.value(fwd.f_prime), &shape)?;
            frozen.mask = Some(make_mask(&attn, shape[1], shape[2], weights.gamma, weights.p, rng)?);
        }
        let mask = frozen.mask.as_ref().expect("mask set above");
        let f_drop = model.forward_with_drop(tape, bound, fwd.f_prime, mask)?;
        Some(loss_drop(tape, fwd.f_map, f_drop, weights.drop_loss_reduction)?)
    } else {
        None
    };

    let (mut sim_term, mut norm_term) = (None, None);
    if stage == Stage::Total && (weights.lambda_sim > 0.0 || weights.lambda_norm > 0.0) {
        let w_c = tape.select_row(bound.head(), label)?;
        let sim = similarity_map(tape, fwd.f_map, w_c)?;
        let norm = norm_map(tape, fwd.f_map)?;
        let (lo, hi) = *frozen.norm_extrema.get_or_insert_with(|| extrema(tape.value(norm)));
        let norm_hat = tape.minmax_normalize_with(norm, lo, hi);

        if weights.lambda_sim > 0.0 {
            if frozen.norm_partition.is_none() {
                frozen.norm_partition = Some(partition_by_norm(tape.value(norm_hat), weights.tau_fg, weights.tau_bg)?);
            }
            sim_term = Some(loss_sim(tape, sim, frozen.norm_partition.as_ref().expect("set above"))?);
        }
        if weights.lambda_norm > 0.0 {
            if frozen.sim_partition.is_none() {
                frozen.sim_partition = Some(if weights.finegrained {
                    let f: Tensor = tape.tensor(fwd.f_map);
                    let all = similarity_all_classes(&f, &tape.tensor(bound.head()))?;
                    partition_by_similarity_finegrained(&all, model.config().num_classes)?
                } else {
                    partition_by_similarity(tape.value(sim))
                });
            }
            norm_term = Some(loss_norm(tape, norm_hat, frozen.sim_partition.as_ref().expect("set above"))?);
        }
    }

    let total = match stage {
        Stage::Warm => match drop {
            Some(d) => warm_loss(tape, ce, d, weights)?,
            None => ce,
        },
        Stage::Total => {
            let zero = tape.constant(Tensor::scalar(0.0));
            total_loss(
                tape,
                ce,
                drop.unwrap_or(zero),
                sim_term.unwrap_or(zero),
                norm_term.unwrap_or(zero),
                weights,
            )?
        }
    };
    Ok(LossTerms {
        total,
        ce,
        drop,
        sim: sim_term,
        norm: norm_term,
        logits: fwd.logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvBlock, ModelConfig};
    use rand::SeedableRng;

    fn tiny() -> Model {
        let cfg = ModelConfig {
            input_channels: 3,
            input_size: 8,
            conv_blocks: vec![
                ConvBlock { out_channels: 4, kernel: 3, stride: 2 },
                ConvBlock { out_channels: 5, kernel: 3, stride: 1 },
            ],
            drop_layer_index: 0,
            num_classes: 3,
            feature_dim: 5,
        };
        Model::init(cfg, 3).unwrap()
    }

    #[test]
    fn terms_follow_stage_and_weights() {
        let m = tiny();
        let img = Tensor::full(&[3, 8, 8], 0.3);
        let w = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (stage, expect_aux) in [(Stage::Warm, false), (Stage::Total, true)] {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape);
            let x = tape.constant(img.clone());
            let t = sample_objective(&m, &mut tape, &b, x, 1, stage, &w, &mut Frozen::default(), &mut rng).unwrap();
            assert!(t.drop.is_some());
            assert_eq!(t.sim.is_some(), expect_aux);
            assert_eq!(t.norm.is_some(), expect_aux);
            let [ce, sim, norm, drop] = t.values(&tape);
            let expected = if expect_aux {
                ce + 3.0 * drop + 0.5 * sim + 0.15 * norm
            } else {
                ce + 3.0 * drop
            };
            assert!((tape.scalar(t.total) - expected).abs() < 1e-12);
        }

        let vanilla = LossWeights { lambda_sim: 0.0, lambda_norm: 0.0, lambda_drop: 0.0, ..w };
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let x = tape.constant(img);
        let t = sample_objective(&m, &mut tape, &b, x, 0, Stage::Total, &vanilla, &mut Frozen::default(), &mut rng)
            .unwrap();
        assert!(t.drop.is_none() && t.sim.is_none() && t.norm.is_none());
        assert_eq!(tape.scalar(t.total), tape.scalar(t.ce));
    }
}
