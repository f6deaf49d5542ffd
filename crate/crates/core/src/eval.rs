//! COCO-style precision/recall matching, per-class AP, dataset mAP and the
//! weighted challenge score.
//!
//! Matching is greedy in descending score order: each detection takes the
//! still-unmatched ground truth of its class in its image with the highest
//! IoU at or above the threshold, equal IoUs going to the lowest annotation
//! id. AP is the mean of the interpolated precision (the maximum precision at
//! any recall at or beyond the level) over evenly spaced recall levels.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::detops::iou;
use crate::error::{Error, Result};
use crate::types::{DatasetIndex, Detection, GroundTruthBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub iou_thresholds: Vec<f64>,
    pub max_dets_per_image: usize,
    pub interpolation_points: usize,
}

impl Default for MatchConfig {
    /// AP@[.50:.95], at most 100 detections per image and class, 101 recall levels.
    fn default() -> Self {
        MatchConfig {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            max_dets_per_image: 100,
            interpolation_points: 101,
        }
    }
}

impl MatchConfig {
    pub fn ap50_only() -> Self {
        MatchConfig {
            iou_thresholds: vec![0.5],
            ..MatchConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::param("iou_thresholds", "must not be empty"));
        }
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::param("iou_thresholds", "each must lie in (0, 1]"));
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("iou_thresholds", "must be strictly ascending"));
        }
        if self.max_dets_per_image == 0 {
            return Err(Error::param("max_dets_per_image", "must be positive"));
        }
        if self.interpolation_points == 0 {
            return Err(Error::param("interpolation_points", "must be positive"));
        }
        Ok(())
    }

    /// Recall levels `j / (R - 1)` for `j = 0..R`; a single level sits at 0.
    pub fn recall_levels(&self) -> Vec<f64> {
        let r = self.interpolation_points;
        if r == 1 {
            return vec![0.0];
        }
        (0..r).map(|j| j as f64 / (r - 1) as f64).collect()
    }
}

/// Cumulative precision/recall after each ranked detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub num_gt: usize,
    /// True-positive flag per ranked detection.
    pub matched: Vec<bool>,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    /// `interpolated[i] = max(precision[i..])`.
    pub interpolated: Vec<f64>,
}

impl PrCurve {
    /// Interpolated precision sampled at the given recall levels, averaged.
    pub fn average_precision(&self, levels: &[f64]) -> f64 {
        if levels.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for &r in levels {
            // first ranked position whose recall reaches r
            let i = self.recall.partition_point(|&x| x < r);
            if i < self.interpolated.len() {
                total += self.interpolated[i];
            }
        }
        total / levels.len() as f64
    }
}

/// Ranks the class's detections and matches them to ground truth at `iou_t`.
pub fn precision_recall(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    class_id: u64,
    iou_t: f64,
    cfg: &MatchConfig,
) -> PrCurve {
    let ranked = ranked_detections(dets, class_id, cfg.max_dets_per_image);

    let mut gt_by_image: BTreeMap<u64, Vec<&GroundTruthBox>> = BTreeMap::new();
    for g in gts.iter().filter(|g| g.category_id == class_id) {
        gt_by_image.entry(g.image_id).or_default().push(g);
    }
    for list in gt_by_image.values_mut() {
        list.sort_by_key(|g| g.annotation_id);
    }
    let num_gt: usize = gt_by_image.values().map(Vec::len).sum();
    let mut taken: BTreeMap<u64, Vec<bool>> = gt_by_image
        .iter()
        .map(|(img, list)| (*img, vec![false; list.len()]))
        .collect();

    let mut matched = Vec::with_capacity(ranked.len());
    for d in &ranked {
        let mut hit = false;
        if let (Some(cands), Some(used)) = (gt_by_image.get(&d.image_id), taken.get_mut(&d.image_id)) {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in cands.iter().enumerate() {
                if used[gi] {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o < iou_t {
                    continue;
                }
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            if let Some((gi, _)) = best {
                used[gi] = true;
                hit = true;
            }
        }
        matched.push(hit);
    }

    let mut recall = Vec::with_capacity(matched.len());
    let mut precision = Vec::with_capacity(matched.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &m in &matched {
        if m {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(if num_gt == 0 {
            0.0
        } else {
            tp as f64 / num_gt as f64
        });
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    let mut interpolated = precision.clone();
    for i in (0..interpolated.len().saturating_sub(1)).rev() {
        if interpolated[i + 1] > interpolated[i] {
            interpolated[i] = interpolated[i + 1];
        }
    }
    PrCurve {
        num_gt,
        matched,
        recall,
        precision,
        interpolated,
    }
}

/// Detections of `class_id`, capped at `max_per_image` per image, ranked by
/// descending score with input order breaking ties.
fn ranked_detections(dets: &[Detection], class_id: u64, max_per_image: usize) -> Vec<&Detection> {
    let mut idx: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].category_id == class_id)
        .collect();
    idx.sort_by(|&i, &j| dets[j].score().total_cmp(&dets[i].score()));
    let mut per_image: BTreeMap<u64, usize> = BTreeMap::new();
    idx.into_iter()
        .filter(|&i| {
            let n = per_image.entry(dets[i].image_id).or_insert(0);
            *n += 1;
            *n <= max_per_image
        })
        .map(|i| &dets[i])
        .collect()
}

/// AP of one class at one IoU threshold, in `[0, 1]`.
///
/// `None` when the class has neither ground truth nor detections; `Some(0.0)`
/// when it has detections but no ground truth.
pub fn average_precision(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    class_id: u64,
    iou_t: f64,
    cfg: &MatchConfig,
) -> Option<f64> {
    let curve = precision_recall(dets, gts, class_id, iou_t, cfg);
    if curve.num_gt == 0 {
        return if curve.matched.is_empty() { None } else { Some(0.0) };
    }
    Some(curve.average_precision(&cfg.recall_levels()))
}

/// One (class, threshold) cell of the evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalUnit {
    pub class_id: u64,
    pub threshold_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMap {
    pub iou: f64,
    /// Percent.
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Mean over thresholds of the mean over annotated classes, in percent.
    pub map: f64,
    /// Per-class AP averaged over thresholds, in percent.
    pub per_class: BTreeMap<u64, f64>,
    pub per_threshold: Vec<ThresholdMap>,
}

/// Dataset-level evaluation split into independent units so callers can
/// schedule them in any order; [`Evaluator::summarize`] reduces in a fixed order.
#[derive(Debug, Clone)]
pub struct Evaluator {
    cfg: MatchConfig,
    classes: Vec<u64>,
    dets_by_class: BTreeMap<u64, Vec<Detection>>,
    gts_by_class: BTreeMap<u64, Vec<GroundTruthBox>>,
}

impl Evaluator {
    pub fn new(dets: &[Detection], dataset: &DatasetIndex, cfg: &MatchConfig) -> Result<Self> {
        cfg.validate()?;
        if dataset.annotations().is_empty() {
            return Err(Error::EmptyGroundTruth);
        }
        let classes: Vec<u64> = dataset.annotated_classes().into_iter().collect();
        let mut gts_by_class: BTreeMap<u64, Vec<GroundTruthBox>> = BTreeMap::new();
        for g in dataset.annotations() {
            gts_by_class.entry(g.category_id).or_default().push(g.clone());
        }
        let mut dets_by_class: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
        for d in dets {
            if gts_by_class.contains_key(&d.category_id) {
                dets_by_class.entry(d.category_id).or_default().push(d.clone());
            }
        }
        Ok(Evaluator {
            cfg: cfg.clone(),
            classes,
            dets_by_class,
            gts_by_class,
        })
    }

    pub fn classes(&self) -> &[u64] {
        &self.classes
    }

    /// Units in class-major, threshold-minor order.
    pub fn units(&self) -> Vec<EvalUnit> {
        let mut out = Vec::with_capacity(self.classes.len() * self.cfg.iou_thresholds.len());
        for &class_id in &self.classes {
            for threshold_index in 0..self.cfg.iou_thresholds.len() {
                out.push(EvalUnit {
                    class_id,
                    threshold_index,
                });
            }
        }
        out
    }

    pub fn unit_ap(&self, unit: EvalUnit) -> f64 {
        let dets = self
            .dets_by_class
            .get(&unit.class_id)
            .map_or(&[][..], Vec::as_slice);
        let gts = self
            .gts_by_class
            .get(&unit.class_id)
            .map_or(&[][..], Vec::as_slice);
        average_precision(
            dets,
            gts,
            unit.class_id,
            self.cfg.iou_thresholds[unit.threshold_index],
            &self.cfg,
        )
        .unwrap_or(0.0)
    }

    /// Reduces unit APs given in [`Evaluator::units`] order.
    pub fn summarize(&self, aps: &[f64]) -> Result<EvalSummary> {
        let n_t = self.cfg.iou_thresholds.len();
        let n_c = self.classes.len();
        if aps.len() != n_t * n_c {
            return Err(Error::dims("evaluation grid", n_t * n_c, aps.len()));
        }
        let mut per_class = BTreeMap::new();
        for (ci, &class_id) in self.classes.iter().enumerate() {
            let row = &aps[ci * n_t..(ci + 1) * n_t];
            per_class.insert(class_id, 100.0 * row.iter().sum::<f64>() / n_t as f64);
        }
        let mut per_threshold = Vec::with_capacity(n_t);
        for (ti, &t) in self.cfg.iou_thresholds.iter().enumerate() {
            let mean_c = (0..n_c).map(|ci| aps[ci * n_t + ti]).sum::<f64>() / n_c as f64;
            per_threshold.push(ThresholdMap {
                iou: t,
                map: 100.0 * mean_c,
            });
        }
        let map = per_threshold.iter().map(|p| p.map).sum::<f64>() / n_t as f64;
        Ok(EvalSummary {
            map,
            per_class,
            per_threshold,
        })
    }

    pub fn run(&self) -> EvalSummary {
        let aps: Vec<f64> = self.units().into_iter().map(|u| self.unit_ap(u)).collect();
        self.summarize(&aps).expect("grid sized from units()")
    }
}

/// mAP in percent: mean over annotated classes, then over IoU thresholds.
pub fn map_score(dets: &[Detection], dataset: &DatasetIndex, cfg: &MatchConfig) -> Result<f64> {
    Ok(Evaluator::new(dets, dataset, cfg)?.run().map)
}

/// The three test-stage datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TestSet {
    D1,
    D2,
    D3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shot {
    One,
    Five,
    Ten,
}

impl TestSet {
    pub const ALL: [TestSet; 3] = [TestSet::D1, TestSet::D2, TestSet::D3];

    fn label(self) -> &'static str {
        match self {
            TestSet::D1 => "D1",
            TestSet::D2 => "D2",
            TestSet::D3 => "D3",
        }
    }
}

impl Shot {
    pub const ALL: [Shot; 3] = [Shot::One, Shot::Five, Shot::Ten];

    pub fn k(self) -> usize {
        match self {
            Shot::One => 1,
            Shot::Five => 5,
            Shot::Ten => 10,
        }
    }

    /// Weight of the shot's three-dataset average in the challenge score.
    pub fn weight(self) -> f64 {
        match self {
            Shot::One => 2.0,
            Shot::Five | Shot::Ten => 1.0,
        }
    }
}

/// Column key such as `D2_5shot`.
pub fn slot_key(set: TestSet, shot: Shot) -> String {
    format!("{}_{}shot", set.label(), shot.k())
}

/// The nine per-dataset, per-shot mAPs (percent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NineMaps {
    values: [[f64; 3]; 3],
}

impl NineMaps {
    /// Rows are D1, D2, D3; columns are 1, 5, 10 shots.
    pub fn new(values: [[f64; 3]; 3]) -> Result<Self> {
        for set in TestSet::ALL {
            for shot in Shot::ALL {
                let v = values[set as usize][shot as usize];
                if !(0.0..=100.0).contains(&v) {
                    return Err(Error::param(
                        "mAP",
                        format!("{} = {v} outside [0, 100]", slot_key(set, shot)),
                    ));
                }
            }
        }
        Ok(NineMaps { values })
    }

    /// Builds from `D{1,2,3}_{1,5,10}shot` keys; every key must be present.
    pub fn from_entries<'a, I>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, f64)>,
    {
        let mut values = [[f64::NAN; 3]; 3];
        for (key, v) in entries {
            let slot = TestSet::ALL
                .iter()
                .flat_map(|&s| Shot::ALL.iter().map(move |&k| (s, k)))
                .find(|&(s, k)| slot_key(s, k) == key);
            match slot {
                Some((s, k)) => values[s as usize][k as usize] = v,
                None => return Err(Error::param("mAP", format!("unknown entry `{key}`"))),
            }
        }
        for set in TestSet::ALL {
            for shot in Shot::ALL {
                if values[set as usize][shot as usize].is_nan() {
                    return Err(Error::MissingEntry(slot_key(set, shot)));
                }
            }
        }
        NineMaps::new(values)
    }

    pub fn get(&self, set: TestSet, shot: Shot) -> f64 {
        self.values[set as usize][shot as usize]
    }

    pub fn entries(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for set in TestSet::ALL {
            for shot in Shot::ALL {
                out.insert(slot_key(set, shot), self.get(set, shot));
            }
        }
        out
    }
}

/// `2·avg(1-shot) + avg(5-shot) + avg(10-shot)` across D1..D3.
pub fn challenge_score(maps: &NineMaps) -> f64 {
    Shot::ALL
        .iter()
        .map(|&shot| {
            let avg = TestSet::ALL.iter().map(|&s| maps.get(s, shot)).sum::<f64>() / 3.0;
            shot.weight() * avg
        })
        .sum()
}

/// Nine mAPs, their challenge score and optional per-class breakdowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub maps: BTreeMap<String, f64>,
    pub score: f64,
    /// Slot key → class id → AP (percent).
    pub per_class: BTreeMap<String, BTreeMap<u64, f64>>,
}

impl ScoreReport {
    pub fn new(maps: &NineMaps, per_class: BTreeMap<String, BTreeMap<u64, f64>>) -> Self {
        ScoreReport {
            maps: maps.entries(),
            score: challenge_score(maps),
            per_class,
        }
    }
}

/// Rounds to two decimals, the leaderboard convention.
pub fn round2(v: f64) -> f64 {
    libm::round(v * 100.0) / 100.0
}
