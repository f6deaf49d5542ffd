//! Pseudo-label refinement loop over a pluggable [`Scorer`].
//!
//! Each iteration scores every image against its current labels, keeps
//! detections whose confidence is strictly above `lambda_conf`, and appends
//! those that do not duplicate an existing same-class label. No model is
//! updated between iterations; a scorer may rebuild internal state (for
//! example a prototype cache) from the labels it is handed.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::detops::iou;
use crate::error::{Error, Result};
use crate::linalg;
use crate::protofusion::{self, Proposal};
use crate::types::{Detection, GroundTruthBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    pub lambda_conf: f64,
    pub iterations: usize,
    pub dedup_iou: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            lambda_conf: 0.6,
            iterations: 5,
            dedup_iou: 0.5,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_conf) {
            return Err(Error::param("lambda_conf", "must lie in [0, 1]"));
        }
        if self.iterations == 0 {
            return Err(Error::param("iterations", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.dedup_iou) {
            return Err(Error::param("dedup_iou", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Detections with score strictly greater than `lambda_conf`, as label
/// records. Their annotation ids are provisional (selection order) until
/// [`merge_labels`] assigns fresh ones.
pub fn select_pseudo_labels(dets: &[Detection], cfg: &PseudoLabelConfig) -> Vec<GroundTruthBox> {
    dets.iter()
        .filter(|d| d.score() > cfg.lambda_conf)
        .enumerate()
        .map(|(i, d)| GroundTruthBox {
            annotation_id: i as u64,
            image_id: d.image_id,
            category_id: d.category_id,
            bbox: d.bbox,
        })
        .collect()
}

/// Appends pseudo labels that overlap no existing label of the same image and
/// class by more than `dedup_iou`. Survivors get ids `next_id, next_id + 1, ..`.
pub fn merge_labels(
    existing: &[GroundTruthBox],
    pseudo: &[GroundTruthBox],
    dedup_iou: f64,
    next_id: &mut u64,
) -> Vec<GroundTruthBox> {
    let mut out = existing.to_vec();
    for p in pseudo {
        let duplicate = existing.iter().any(|e| {
            e.image_id == p.image_id
                && e.category_id == p.category_id
                && iou(&e.bbox, &p.bbox) > dedup_iou
        });
        if !duplicate {
            out.push(GroundTruthBox {
                annotation_id: *next_id,
                ..p.clone()
            });
            *next_id += 1;
        }
    }
    out
}

/// Produces detections for one image given its current labels.
pub trait Scorer {
    type Error: fmt::Display;

    /// `iteration` is 1-based.
    fn score(
        &mut self,
        iteration: usize,
        image_id: u64,
        labels: &[GroundTruthBox],
    ) -> core::result::Result<Vec<Detection>, Self::Error>;

    /// Called before each image when state is reset per image.
    fn reset(&mut self, _image_id: u64) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoopMode {
    /// Iterations run over all images; labels and scorer state carry across images.
    #[default]
    Carry,
    /// Each image runs its own T iterations after [`Scorer::reset`].
    ResetPerImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    /// Set in [`LoopMode::ResetPerImage`].
    pub image_id: Option<u64>,
    pub selected: usize,
    pub added_ids: Vec<u64>,
    /// Total labels after the iteration.
    pub label_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoopError<E> {
    Config(Error),
    Scorer {
        iteration: usize,
        image_id: u64,
        source: E,
    },
}

impl<E: fmt::Display> fmt::Display for LoopError<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoopError::Config(e) => write!(f, "invalid self-training config: {e}"),
            LoopError::Scorer {
                iteration,
                image_id,
                source,
            } => write!(
                f,
                "scorer failed at iteration {iteration} on image {image_id}: {source}"
            ),
        }
    }
}

impl<E: fmt::Debug + fmt::Display> core::error::Error for LoopError<E> {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainOutcome {
    pub labels: Vec<GroundTruthBox>,
    pub trace: Vec<IterationTrace>,
}

fn step<S: Scorer>(
    scorer: &mut S,
    iteration: usize,
    image_id: u64,
    labels: &mut Vec<GroundTruthBox>,
    cfg: &PseudoLabelConfig,
    next_id: &mut u64,
) -> core::result::Result<(usize, Vec<u64>), LoopError<S::Error>> {
    let current: Vec<GroundTruthBox> = labels
        .iter()
        .filter(|l| l.image_id == image_id)
        .cloned()
        .collect();
    let dets = scorer
        .score(iteration, image_id, &current)
        .map_err(|source| LoopError::Scorer {
            iteration,
            image_id,
            source,
        })?;
    let dets: Vec<Detection> = dets.into_iter().filter(|d| d.image_id == image_id).collect();
    let pseudo = select_pseudo_labels(&dets, cfg);
    let before = *next_id;
    let merged = merge_labels(&current, &pseudo, cfg.dedup_iou, next_id);
    let added: Vec<GroundTruthBox> = merged.into_iter().skip(current.len()).collect();
    let ids = (before..*next_id).collect();
    labels.extend(added);
    Ok((pseudo.len(), ids))
}

/// Runs `cfg.iterations` rounds of score → select → merge.
pub fn self_train_loop<S: Scorer>(
    image_ids: &[u64],
    scorer: &mut S,
    initial_labels: &[GroundTruthBox],
    cfg: &PseudoLabelConfig,
    mode: LoopMode,
) -> core::result::Result<SelfTrainOutcome, LoopError<S::Error>> {
    cfg.validate().map_err(LoopError::Config)?;
    let mut labels = initial_labels.to_vec();
    let mut next_id = labels.iter().map(|l| l.annotation_id + 1).max().unwrap_or(1);
    let mut trace = Vec::new();
    match mode {
        LoopMode::Carry => {
            for t in 1..=cfg.iterations {
                let mut selected = 0;
                let mut added_ids = Vec::new();
                for &img in image_ids {
                    let (s, ids) = step(scorer, t, img, &mut labels, cfg, &mut next_id)?;
                    selected += s;
                    added_ids.extend(ids);
                }
                trace.push(IterationTrace {
                    iteration: t,
                    image_id: None,
                    selected,
                    added_ids,
                    label_count: labels.len(),
                });
            }
        }
        LoopMode::ResetPerImage => {
            for &img in image_ids {
                scorer.reset(img);
                for t in 1..=cfg.iterations {
                    let (selected, added_ids) = step(scorer, t, img, &mut labels, cfg, &mut next_id)?;
                    trace.push(IterationTrace {
                        iteration: t,
                        image_id: Some(img),
                        selected,
                        added_ids,
                        label_count: labels.len(),
                    });
                }
            }
        }
    }
    Ok(SelfTrainOutcome { labels, trace })
}

/// Replays scripted detections: `outputs[t - 1]` holds iteration `t`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayScorer {
    outputs: Vec<Vec<Detection>>,
}

impl ReplayScorer {
    pub fn new(outputs: Vec<Vec<Detection>>) -> Self {
        ReplayScorer { outputs }
    }

    pub fn iterations(&self) -> usize {
        self.outputs.len()
    }
}

impl Scorer for ReplayScorer {
    type Error = Error;

    fn score(&mut self, iteration: usize, image_id: u64, _labels: &[GroundTruthBox]) -> Result<Vec<Detection>> {
        let Some(round) = iteration.checked_sub(1).and_then(|i| self.outputs.get(i)) else {
            return Err(Error::param(
                "replay",
                alloc::format!("no scripted output for iteration {iteration}"),
            ));
        };
        Ok(round.iter().filter(|d| d.image_id == image_id).cloned().collect())
    }
}

/// Scores proposals by softmax over temperature-scaled cosine to class
/// prototypes. Prototypes start as the means of the support vectors and,
/// on every call, fold in the embeddings of proposals whose box coincides
/// (IoU ≥ `match_iou`) with a current label of the same class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeScorer {
    supports: BTreeMap<u64, Vec<Vec<f64>>>,
    proposals: BTreeMap<u64, Vec<Proposal>>,
    tau: f64,
    match_iou: f64,
}

impl PrototypeScorer {
    pub fn new(
        supports: &[(Vec<f64>, u64)],
        proposals: Vec<Proposal>,
        tau: f64,
    ) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::param("tau", "must be positive"));
        }
        let mut by_class: BTreeMap<u64, Vec<Vec<f64>>> = BTreeMap::new();
        let dim = supports.first().map(|s| s.0.len());
        for (v, c) in supports {
            if Some(v.len()) != dim {
                return Err(Error::dims("support vector", dim.unwrap_or(0), v.len()));
            }
            by_class.entry(*c).or_default().push(v.clone());
        }
        if by_class.is_empty() {
            return Err(Error::param("supports", "need at least one"));
        }
        let mut per_image: BTreeMap<u64, Vec<Proposal>> = BTreeMap::new();
        for p in proposals {
            if Some(p.vector.len()) != dim {
                return Err(Error::dims("proposal vector", dim.unwrap_or(0), p.vector.len()));
            }
            per_image.entry(p.image_id).or_default().push(p);
        }
        Ok(PrototypeScorer {
            supports: by_class,
            proposals: per_image,
            tau,
            match_iou: 0.5,
        })
    }

    fn prototypes(&self, image_id: u64, labels: &[GroundTruthBox]) -> (Vec<u64>, Vec<Vec<f64>>) {
        let mut members = self.supports.clone();
        let props = self.proposals.get(&image_id).map_or(&[][..], Vec::as_slice);
        let mut used = BTreeSet::new();
        for l in labels {
            for (i, p) in props.iter().enumerate() {
                if !used.contains(&i) && iou(&p.bbox, &l.bbox) >= self.match_iou {
                    if let Some(m) = members.get_mut(&l.category_id) {
                        m.push(p.vector.clone());
                        used.insert(i);
                    }
                }
            }
        }
        let classes: Vec<u64> = members.keys().copied().collect();
        let protos = members
            .values()
            .map(|vs| linalg::mean_vector(vs).expect("class has a support"))
            .collect();
        (classes, protos)
    }
}

impl Scorer for PrototypeScorer {
    type Error = Error;

    fn score(&mut self, _iteration: usize, image_id: u64, labels: &[GroundTruthBox]) -> Result<Vec<Detection>> {
        let (classes, protos) = self.prototypes(image_id, labels);
        let props = self.proposals.get(&image_id).map_or(&[][..], Vec::as_slice);
        let mut out = Vec::with_capacity(props.len());
        for p in props {
            let probs = linalg::softmax(&protofusion::tempered_scores(&p.vector, &protos, self.tau)?);
            let (best, conf) = probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
            out.push(Detection::new(image_id, classes[best], p.bbox, conf.clamp(0.0, 1.0))?);
        }
        Ok(out)
    }
}
