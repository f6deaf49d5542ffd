//! Box overlap, greedy per-class NMS and the reliability-weighted ensemble.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BBox, Detection};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SCORE_FLOOR: f64 = 0.0;

/// Intersection over union. Zero-area boxes overlap nothing.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let area_a = a.area();
    let area_b = b.area();
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let iw = a.x_max().min(b.x_max()) - a.x_min().max(b.x_min());
    let ih = a.y_max().min(b.y_max()) - a.y_min().max(b.y_min());
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Indices of `dets` by descending score; equal scores keep input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score().total_cmp(&dets[i].score()));
    order
}

/// Greedy non-maximum suppression within each `(image_id, category_id)` group.
///
/// A candidate is dropped when its IoU with an already kept box of the same
/// group is strictly greater than `iou_threshold`. Survivors come back in
/// descending score order, ties broken by lower input index.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: BTreeMap<(u64, u64), Vec<BBox>> = BTreeMap::new();
    let mut out = Vec::new();
    for i in score_order(dets) {
        let d = &dets[i];
        let group = kept.entry((d.image_id, d.category_id)).or_default();
        if group.iter().all(|k| iou(k, &d.bbox) <= iou_threshold) {
            group.push(d.bbox);
            out.push(d.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub reliability_weights: BTreeMap<String, f64>,
    pub iou_threshold: f64,
    pub score_floor: f64,
}

impl EnsembleConfig {
    pub fn new(reliability_weights: BTreeMap<String, f64>) -> Self {
        EnsembleConfig {
            reliability_weights,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            score_floor: DEFAULT_SCORE_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (src, w) in &self.reliability_weights {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::param(
                    "reliability_weights",
                    format!("weight for `{src}` must be finite and >= 0, got {w}"),
                ));
            }
        }
        if !self.reliability_weights.values().any(|w| *w > 0.0) {
            return Err(Error::param(
                "reliability_weights",
                "at least one weight must be positive",
            ));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::param("iou_threshold", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::param("score_floor", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Confidence-reweighted ensemble: every score is multiplied by its source's
/// reliability weight and clamped to `[0, 1]`, the sources are pooled in the
/// given order, detections under `score_floor` are dropped, and one NMS pass
/// runs over the pool.
pub fn ensemble(det_sets: &[(String, Vec<Detection>)], cfg: &EnsembleConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut pooled = Vec::new();
    for (source, dets) in det_sets {
        let weight = *cfg
            .reliability_weights
            .get(source)
            .ok_or_else(|| Error::UnknownSource(source.clone()))?;
        for d in dets {
            let reweighted = d
                .clone()
                .with_clamped_score(d.score() * weight)
                .with_source(source.clone());
            if reweighted.score() >= cfg.score_floor {
                pooled.push(reweighted);
            }
        }
    }
    Ok(nms(&pooled, cfg.iou_threshold))
}
