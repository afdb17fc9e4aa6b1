//! Model-level evaluation: per-image inference, score maps from CAM, 𝓕 or
//! 𝓢, and the localization report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cam::{decompose, DecompositionMaps};
use crate::config::EvalConfig;
use crate::data::LocalizationSample;
use crate::error::{Error, Result};
use crate::eval::{
    locations_in_boxes, locations_in_mask, maxboxaccv2, normalize_map, pxap, region_histograms, top_k_gt_loc,
    upsample_bilinear, BoxProtocol, EvalReport, Histogram, Normalization, ScoreMap, SweepCurve,
};
use crate::model::Model;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapSource {
    #[default]
    Cam,
    Norm,
    Sim,
}

impl MapSource {
    pub fn name(self) -> &'static str {
        match self {
            MapSource::Cam => "cam",
            MapSource::Norm => "norm",
            MapSource::Sim => "sim",
        }
    }

    /// 𝓢 can be negative, so it is divided by its maximum instead of being
    /// min-max scaled.
    pub fn normalization(self) -> Normalization {
        match self {
            MapSource::Sim => Normalization::Max,
            _ => Normalization::MinMax,
        }
    }

    pub fn select(self, d: &DecompositionMaps) -> &[f64] {
        match self {
            MapSource::Cam => &d.cam,
            MapSource::Norm => &d.norm_map,
            MapSource::Sim => &d.sim_map,
        }
    }
}

impl std::str::FromStr for MapSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cam" => Ok(MapSource::Cam),
            "norm" => Ok(MapSource::Norm),
            "sim" => Ok(MapSource::Sim),
            other => Err(format!("unknown map source {other:?} (cam, norm, sim)")),
        }
    }
}

/// Logits and final feature map of one image.
#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Vec<f64>,
    pub f_map: Tensor,
}

pub fn infer(model: &Model, sample: &LocalizationSample) -> Result<Inference> {
    let image = sample.image_tensor();
    model.check_image(&image)?;
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape);
    let x = tape.constant(image);
    let fwd = model.forward(&mut tape, &bound, x)?;
    Ok(Inference {
        logits: tape.value(fwd.logits).to_vec(),
        f_map: tape.tensor(fwd.f_map),
    })
}

pub fn decompose_sample(model: &Model, inference: &Inference, class: usize) -> Result<DecompositionMaps> {
    decompose(&inference.f_map, model.class_weight(class)?, class)
}

/// Raw (unnormalized) score map for `source`, upsampled to image size.
pub fn score_map(decomp: &DecompositionMaps, source: MapSource, image_size: usize) -> Result<ScoreMap> {
    let values = upsample_bilinear(source.select(decomp), decomp.height, decomp.width, image_size, image_size)?;
    Ok(ScoreMap {
        width: image_size,
        height: image_size,
        values,
    })
}

/// Report plus the diagnostics computed alongside it.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub curve: SweepCurve,
    pub sim_histogram: Histogram,
    pub norm_histogram: Histogram,
    /// Mean 𝓢 over feature locations whose centre pixel is in the mask.
    pub mean_sim_in_mask: f64,
    /// Fraction of in-box feature locations with 𝓢 > 0.5.
    pub sim_mass_above_half: f64,
}

fn check_classes(model: &Model, samples: &[LocalizationSample]) -> Result<()> {
    let c = model.config().num_classes;
    if let Some(s) = samples.iter().find(|s| s.label >= c) {
        return Err(Error::invalid(format!(
            "sample label {} exceeds the model's {c} classes",
            s.label
        )));
    }
    Ok(())
}

/// Evaluates ground-truth-class maps from `source` on `samples`.
pub fn evaluate(model: &Model, samples: &[LocalizationSample], source: MapSource, cfg: &EvalConfig) -> Result<Evaluation> {
    check_classes(model, samples)?;
    let mut maps = Vec::with_capacity(samples.len());
    let mut logits = Vec::with_capacity(samples.len());
    let mut sim_hist = Histogram::new(-1.0, 1.0, cfg.histogram_bins)?;
    let mut norm_hist = Histogram::new(0.0, 1.0, cfg.histogram_bins)?;
    let (mut in_mask_sum, mut in_mask_count) = (0.0, 0usize);
    let (mut above, mut in_box) = (0usize, 0usize);

    for s in samples {
        let inf = infer(model, s)?;
        let d = decompose_sample(model, &inf, s.label)?;
        let (sh, nh) = region_histograms(&d, &s.gt_boxes, s.size, cfg.histogram_bins)?;
        sim_hist.merge(&sh);
        norm_hist.merge(&nh);
        for (u, hit) in locations_in_mask(d.height, d.width, s.size, &s.gt_mask).into_iter().enumerate() {
            if hit {
                in_mask_sum += d.sim_map[u];
                in_mask_count += 1;
            }
        }
        for (u, hit) in locations_in_boxes(d.height, d.width, s.size, &s.gt_boxes).into_iter().enumerate() {
            if hit {
                in_box += 1;
                if d.sim_map[u] > 0.5 {
                    above += 1;
                }
            }
        }
        maps.push(score_map(&d, source, s.size)?);
        logits.push(inf.logits);
    }

    let protocol = BoxProtocol {
        normalization: source.normalization(),
        connectivity: cfg.connectivity,
    };
    let gt: Vec<_> = samples.iter().map(|s| s.gt_boxes.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let (top1, gt_loc) = top_k_gt_loc(&gt, &maps, &logits, &labels, 1, cfg.loc_delta, cfg.loc_tau, protocol)?;
    let top5 = if model.config().num_classes > 5 {
        Some(top_k_gt_loc(&gt, &maps, &logits, &labels, 5, cfg.loc_delta, cfg.loc_tau, protocol)?.0)
    } else {
        None
    };
    let mba = maxboxaccv2(&gt, &maps, &cfg.deltas, &cfg.grid(), protocol)?;
    let normalized: Vec<Vec<f64>> = maps.iter().map(|m| normalize_map(&m.values, protocol.normalization)).collect();
    let masks: Vec<Vec<bool>> = samples.iter().map(|s| s.gt_mask.clone()).collect();
    let px = if samples.is_empty() { None } else { Some(pxap(&normalized, &masks)?) };
    let correct = logits
        .iter()
        .zip(&labels)
        .filter(|(l, &y)| crate::eval::in_top_k(l, y, 1))
        .count();
    let n = samples.len().max(1) as f64;

    let report = EvalReport {
        map_source: source.name().to_string(),
        num_images: samples.len(),
        loc_tau: cfg.loc_tau,
        top1_loc: top1,
        top5_loc: top5,
        gt_loc,
        classification_acc: correct as f64 / n,
        maxboxaccv2_per_delta: mba.per_delta.iter().map(|(d, v)| (format!("{d:.1}"), *v)).collect::<BTreeMap<_, _>>(),
        maxboxaccv2_mean: mba.mean,
        pxap: px,
    };
    Ok(Evaluation {
        report,
        curve: mba.curve,
        sim_histogram: sim_hist,
        norm_histogram: norm_hist,
        mean_sim_in_mask: if in_mask_count > 0 { in_mask_sum / in_mask_count as f64 } else { 0.0 },
        sim_mass_above_half: if in_box > 0 { above as f64 / in_box as f64 } else { 0.0 },
    })
}

/// GT Loc of the CAM alone (model selection).
pub fn gt_loc(model: &Model, samples: &[LocalizationSample], cfg: &EvalConfig) -> Result<f64> {
    check_classes(model, samples)?;
    let protocol = BoxProtocol {
        normalization: Normalization::MinMax,
        connectivity: cfg.connectivity,
    };
    let mut maps = Vec::with_capacity(samples.len());
    let mut logits = Vec::with_capacity(samples.len());
    for s in samples {
        let inf = infer(model, s)?;
        let d = decompose_sample(model, &inf, s.label)?;
        maps.push(score_map(&d, MapSource::Cam, s.size)?);
        logits.push(inf.logits);
    }
    let gt: Vec<_> = samples.iter().map(|s| s.gt_boxes.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(top_k_gt_loc(&gt, &maps, &logits, &labels, 1, cfg.loc_delta, cfg.loc_tau, protocol)?.1)
}
