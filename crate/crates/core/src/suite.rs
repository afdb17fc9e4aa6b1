//! Finite-difference checks over every layer and loss of a tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{LossWeights, Stage};
use crate::model::{ConvBlock, Model, ModelConfig};
use crate::objective::{sample_objective, Frozen, LossTerms};
use crate::tensor::{extrema, grad_check, GradCheckOptions, Tape, Tensor, Var};

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
    pub num_params: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub passed: bool,
}

/// Two conv blocks on an 8×8 input, giving a 4×4 final feature map.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input_channels: 3,
        input_size: 8,
        conv_blocks: vec![
            ConvBlock { out_channels: 4, kernel: 3, stride: 2 },
            ConvBlock { out_channels: 6, kernel: 3, stride: 1 },
        ],
        drop_layer_index: 0,
        num_classes: 3,
        feature_dim: 6,
    }
}

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape")
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let c = tape.constant(r.clone());
    let prod = tape.mul(out, c)?;
    tape.sum(prod)
}

type Pick = fn(&LossTerms) -> Option<Var>;

pub fn gradient_suite(opts: GradCheckOptions, seed: u64) -> Result<SuiteReport> {
    let mut entries = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut push = |name: &str, params: usize, report: crate::tensor::GradCheckReport| {
        entries.push(SuiteEntry {
            name: name.to_string(),
            max_rel_error: report.max_rel_error(),
            passed: report.passed,
            num_params: params,
        });
    };

    // single ops
    let x = random(&[2, 6, 6], 1.0, &mut rng);
    let k = random(&[3, 2, 3, 3], 1.0, &mut rng);
    let r = random(&[3, 3, 3], 1.0, &mut rng);
    let rep = grad_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1)?;
            project(t, y, &r)
        },
        &[x.clone(), k],
        opts,
    )?;
    push("conv2d", 2, rep);

    let b = random(&[2], 1.0, &mut rng);
    let r = random(&[2, 6, 6], 1.0, &mut rng);
    let rep = grad_check(
        |t, v| {
            let y = t.channel_bias(v[0], v[1])?;
            let y = t.relu(y);
            project(t, y, &r)
        },
        &[x.clone(), b],
        opts,
    )?;
    push("channel_bias+relu", 2, rep);

    let w = random(&[3, 2], 1.0, &mut rng);
    let r = random(&[3], 1.0, &mut rng);
    let rep = grad_check(
        |t, v| {
            let p = t.global_average_pool(v[0])?;
            let y = t.linear_no_bias(p, v[1])?;
            project(t, y, &r)
        },
        &[x.clone(), w],
        opts,
    )?;
    push("gap+linear", 2, rep);

    let wc = random(&[2], 1.0, &mut rng);
    let r = random(&[6, 6], 1.0, &mut rng);
    let rep = grad_check(
        |t, v| {
            let s = t.similarity_map(v[0], v[1])?;
            project(t, s, &r)
        },
        &[x.clone(), wc.clone()],
        opts,
    )?;
    push("similarity_map", 2, rep);

    let rep = grad_check(
        |t, v| {
            let n = t.norm_map(v[0])?;
            let m = t.channel_mean(v[0])?;
            let s = t.add(n, m)?;
            project(t, s, &r)
        },
        &[x.clone()],
        opts,
    )?;
    push("norm_map+channel_mean", 1, rep);

    // extrema frozen at the base point
    let base = {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let n = t.norm_map(xv)?;
        extrema(t.value(n))
    };
    let rep = grad_check(
        |t, v| {
            let n = t.norm_map(v[0])?;
            let h = t.minmax_normalize_with(n, base.0, base.1);
            project(t, h, &r)
        },
        &[x.clone()],
        opts,
    )?;
    push("minmax_normalize", 1, rep);

    let keep: Vec<bool> = (0..36).map(|i| i % 5 != 0).collect();
    let r3 = random(&[2, 6, 6], 1.0, &mut rng);
    let rep = grad_check(
        |t, v| {
            let y = t.spatial_mask(v[0], &keep)?;
            project(t, y, &r3)
        },
        &[x],
        opts,
    )?;
    push("spatial_mask", 1, rep);

    // model losses
    let config = tiny_model_config();
    let model = Model::init(config.clone(), seed)?;
    let params: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let image = random(&[3, 8, 8], 0.5, &mut rng);
    let label = 1;
    let cases: [(&str, Pick, Stage, bool); 7] = [
        ("cross_entropy", |t| Some(t.ce), Stage::Total, false),
        ("loss_sim", |t| t.sim, Stage::Total, false),
        ("loss_norm", |t| t.norm, Stage::Total, false),
        ("loss_norm_finegrained", |t| t.norm, Stage::Total, true),
        ("loss_drop", |t| t.drop, Stage::Total, false),
        ("warm_total", |t| Some(t.total), Stage::Warm, false),
        ("total", |t| Some(t.total), Stage::Total, false),
    ];
    for (name, pick, stage, finegrained) in cases {
        // p = 1 drops every attentive location so L_drop has a gradient
        let weights = LossWeights {
            finegrained,
            p: 1.0,
            ..LossWeights::default()
        };
        let mut frozen = Frozen::default();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let rep = grad_check(
            |t, v| {
                let bound = model.bind_vars(v)?;
                let xv = t.constant(image.clone());
                let terms = sample_objective(&model, t, &bound, xv, label, stage, &weights, &mut frozen, &mut drop_rng)?;
                Ok(pick(&terms).expect("term is active"))
            },
            &params,
            opts,
        )?;
        push(name, params.len(), rep);
    }

    let passed = entries.iter().all(|e| e.passed);
    Ok(SuiteReport { entries, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_has_four_by_four_features() {
        let c = tiny_model_config();
        c.validate().unwrap();
        assert_eq!(c.feature_size(), 4);
        assert_eq!(c.conv_blocks.len(), 2);
    }

    #[test]
    fn suite_passes_at_default_tolerance() {
        let r = gradient_suite(GradCheckOptions::default(), 0).unwrap();
        for e in &r.entries {
            assert!(e.passed, "{} max rel error {:e}", e.name, e.max_rel_error);
        }
        assert!(r.passed);
        assert_eq!(r.entries.len(), 14);
    }

    #[test]
    fn injected_fault_is_caught() {
        let opts = GradCheckOptions {
            inject_fault: true,
            ..GradCheckOptions::default()
        };
        let r = gradient_suite(opts, 0).unwrap();
        assert!(!r.passed);
        assert!(r.entries.iter().all(|e| !e.passed));
    }
}
