//! Region partitions and the alignment / consistency objectives.
//!
//! * `L_sim` raises 𝓢 on the high-norm region and lowers it on the low-norm
//!   region (regions taken from F̂).
//! * `L_norm` raises F̂ where 𝓢 is positive and lowers it where 𝓢 is negative.
//! * `L_drop` ties `F` to `F_drop`, the features recomputed after attentive
//!   dropout.
//!
//! Partitions are computed from plain values, so they never carry gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionSource {
    NormBased,
    SimilarityBased,
    SimilarityFinegrained,
}

/// Disjoint foreground/background location sets; everything else is unknown.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPartition {
    pub fg: Vec<usize>,
    pub bg: Vec<usize>,
    pub source: PartitionSource,
}

pub fn partition_by_norm(norm_hat: &[f64], tau_fg: f64, tau_bg: f64) -> Result<RegionPartition> {
    if !(0.0 <= tau_bg && tau_bg < tau_fg && tau_fg <= 1.0) {
        return Err(Error::invalid(format!(
            "need 0 <= tau_bg < tau_fg <= 1, got tau_bg={tau_bg}, tau_fg={tau_fg}"
        )));
    }
    let mut part = RegionPartition {
        fg: Vec::new(),
        bg: Vec::new(),
        source: PartitionSource::NormBased,
    };
    for (u, &v) in norm_hat.iter().enumerate() {
        if v > tau_fg {
            part.fg.push(u);
        } else if v < tau_bg {
            part.bg.push(u);
        }
    }
    Ok(part)
}

pub fn partition_by_similarity(sim: &[f64]) -> RegionPartition {
    let mut part = RegionPartition {
        fg: Vec::new(),
        bg: Vec::new(),
        source: PartitionSource::SimilarityBased,
    };
    for (u, &s) in sim.iter().enumerate() {
        if s > 0.0 {
            part.fg.push(u);
        } else if s < 0.0 {
            part.bg.push(u);
        }
    }
    part
}

/// Background = locations whose similarity is non-positive for every class;
/// foreground = the rest. `sim_all` is `[C, H·W]` row-major.
pub fn partition_by_similarity_finegrained(sim_all: &[f64], num_classes: usize) -> Result<RegionPartition> {
    if num_classes == 0 || sim_all.len() % num_classes != 0 {
        return Err(Error::invalid(format!(
            "{} similarity values do not split into {num_classes} classes",
            sim_all.len()
        )));
    }
    let plane = sim_all.len() / num_classes;
    let mut part = RegionPartition {
        fg: Vec::new(),
        bg: Vec::new(),
        source: PartitionSource::SimilarityFinegrained,
    };
    for u in 0..plane {
        let best = (0..num_classes)
            .map(|c| sim_all[c * plane + u])
            .fold(f64::NEG_INFINITY, f64::max);
        if best > 0.0 {
            part.fg.push(u);
        } else {
            part.bg.push(u);
        }
    }
    Ok(part)
}

fn check_grid(tape: &Tape, map: Var, part: &RegionPartition) -> Result<()> {
    let n = tape.value(map).len();
    if part.fg.iter().chain(&part.bg).any(|&u| u >= n) {
        return Err(Error::invalid("partition does not match the map's grid"));
    }
    Ok(())
}

/// `-mean(𝓢[fg]) + mean(𝓢[bg])`, partition from F̂.
pub fn loss_sim(tape: &mut Tape, sim_map: Var, part: &RegionPartition) -> Result<Var> {
    check_grid(tape, sim_map, part)?;
    tape.region_contrast(sim_map, &part.fg, &part.bg)
}

/// `-mean(F̂[fg]) + mean(F̂[bg])`, partition from 𝓢.
pub fn loss_norm(tape: &mut Tape, norm_hat: Var, part: &RegionPartition) -> Result<Var> {
    if part.source == PartitionSource::NormBased {
        return Err(Error::invalid("loss_norm needs a similarity-based partition"));
    }
    check_grid(tape, norm_hat, part)?;
    tape.region_contrast(norm_hat, &part.fg, &part.bg)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropReduction {
    #[default]
    Mean,
    Sum,
}

/// `‖F - F_drop‖₁`, averaged over elements by default.
pub fn loss_drop(tape: &mut Tape, f_map: Var, f_drop: Var, reduction: DropReduction) -> Result<Var> {
    tape.abs_diff(f_map, f_drop, reduction == DropReduction::Mean)
}

/// Loss weights and the hyperparameters of the partitions and dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_sim: f64,
    pub lambda_norm: f64,
    pub lambda_drop: f64,
    pub tau_fg: f64,
    pub tau_bg: f64,
    pub gamma: f64,
    pub p: f64,
    pub warm_epochs: usize,
    pub finegrained: bool,
    pub drop_loss_reduction: DropReduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sim: 0.5,
            lambda_norm: 0.15,
            lambda_drop: 3.0,
            tau_fg: 0.6,
            tau_bg: 0.1,
            gamma: 0.8,
            p: 0.5,
            warm_epochs: 6,
            finegrained: false,
            drop_loss_reduction: DropReduction::Mean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_sim", self.lambda_sim),
            ("lambda_norm", self.lambda_norm),
            ("lambda_drop", self.lambda_drop),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(name, "must be non-negative"));
            }
        }
        if !(0.0 <= self.tau_bg && self.tau_bg < self.tau_fg && self.tau_fg <= 1.0) {
            return Err(Error::config("tau_bg", "need 0 <= tau_bg < tau_fg <= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("gamma", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config("p", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warm,
    Total,
}

impl Stage {
    pub fn for_epoch(epoch: usize, warm_epochs: usize) -> Stage {
        if epoch < warm_epochs {
            Stage::Warm
        } else {
            Stage::Total
        }
    }
}

/// `ce + λ_drop·l_drop + λ_sim·l_sim + λ_norm·l_norm`.
pub fn total_loss(tape: &mut Tape, ce: Var, l_drop: Var, l_sim: Var, l_norm: Var, w: &LossWeights) -> Result<Var> {
    tape.weighted_sum(
        &[ce, l_drop, l_sim, l_norm],
        &[1.0, w.lambda_drop, w.lambda_sim, w.lambda_norm],
    )
}

/// `ce + λ_drop·l_drop`.
pub fn warm_loss(tape: &mut Tape, ce: Var, l_drop: Var, w: &LossWeights) -> Result<Var> {
    tape.weighted_sum(&[ce, l_drop], &[1.0, w.lambda_drop])
}
