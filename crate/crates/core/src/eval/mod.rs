//! Localization evaluation: boxes from score maps, IoU, Top-k / GT Loc,
//! MaxBoxAccV2, PxAP and in-box histograms of the decomposition maps.

mod boxes;
mod histogram;
mod metrics;

pub use boxes::{
    boxes_at_threshold, connected_components, extract_boxes, iou, normalize_map, upsample_bilinear, BBox,
    Component, Connectivity, Normalization,
};
pub use histogram::{locations_in_boxes, locations_in_mask, region_histograms, Histogram};
pub use metrics::{
    box_accuracy, in_top_k, maxboxaccv2, pxap, tau_grid, top_k_gt_loc, BoxProtocol, MaxBoxAccV2, ScoreMap,
    SweepCurve,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Summary metrics for one evaluated split. All values lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_source: String,
    pub num_images: usize,
    pub loc_tau: f64,
    pub top1_loc: f64,
    pub top5_loc: Option<f64>,
    pub gt_loc: f64,
    pub classification_acc: f64,
    /// Keyed by δ formatted with one decimal, e.g. `"0.5"`.
    pub maxboxaccv2_per_delta: BTreeMap<String, f64>,
    pub maxboxaccv2_mean: f64,
    pub pxap: Option<f64>,
}
