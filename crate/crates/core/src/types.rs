//! Domain types shared by every module.
//!
//! Boxes are stored in corner form `(x_min, y_min, x_max, y_max)`; the COCO
//! `[x, y, width, height]` layout only appears at the file boundary through
//! [`BBox::from_xywh`] and [`BBox::to_xywh`].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Axis-aligned rectangle in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite corner ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        if x_min > x_max || y_min > y_max {
            return Err(Error::InvalidBox(format!(
                "corners out of order ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Converts COCO `[x, y, w, h]`; negative extents are rejected.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if w < 0.0 || h < 0.0 {
            return Err(Error::InvalidBox(format!("negative extent w={w} h={h}")));
        }
        BBox::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [
            self.x_min,
            self.y_min,
            self.x_max - self.x_min,
            self.y_max - self.y_min,
        ]
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Clamps the box into `[0, width] x [0, height]`.
    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        BBox {
            x_min: cx(self.x_min),
            y_min: cy(self.y_min),
            x_max: cx(self.x_max),
            y_max: cy(self.y_max),
        }
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }
}

/// A labeled instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub annotation_id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
}

/// A scored prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    score: f64,
    pub source_id: Option<String>,
}

impl Detection {
    pub fn new(image_id: u64, category_id: u64, bbox: BBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidScore { image_id, score });
        }
        Ok(Detection {
            image_id,
            category_id,
            bbox,
            score,
            source_id: None,
        })
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source_id = Some(source.into());
        self
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    /// Replaces the score, clamping into `[0, 1]`.
    pub fn with_clamped_score(mut self, score: f64) -> Self {
        self.score = score.clamp(0.0, 1.0);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: f64,
    pub height: f64,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

/// An annotation as it appears on disk, box still in `[x, y, w, h]` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
}

/// Non-fatal findings while building a [`DatasetIndex`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LoadWarning {
    ClampedBox {
        annotation_id: u64,
        original: [f64; 4],
    },
}

impl core::fmt::Display for LoadWarning {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            LoadWarning::ClampedBox {
                annotation_id,
                original,
            } => write!(
                f,
                "annotation {annotation_id}: box {original:?} exceeds image bounds, clamped"
            ),
        }
    }
}

/// Images, categories and annotations of one dataset, referentially checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    images: BTreeMap<u64, ImageInfo>,
    categories: BTreeMap<u64, String>,
    annotations: Vec<GroundTruthBox>,
}

impl DatasetIndex {
    /// Validates and converts raw records. Errors name the offending record;
    /// out-of-bounds boxes are clamped and reported as warnings.
    pub fn from_parts(
        images: Vec<ImageInfo>,
        categories: Vec<Category>,
        annotations: Vec<RawAnnotation>,
    ) -> Result<(Self, Vec<LoadWarning>)> {
        let mut image_map = BTreeMap::new();
        for img in images {
            if !(img.width > 0.0 && img.height > 0.0) {
                return Err(Error::InvalidImageSize { id: img.id });
            }
            let id = img.id;
            if image_map.insert(id, img).is_some() {
                return Err(Error::DuplicateId {
                    record: "image",
                    id: id.to_string(),
                });
            }
        }
        let mut category_map = BTreeMap::new();
        for cat in categories {
            if category_map.insert(cat.id, cat.name).is_some() {
                return Err(Error::DuplicateId {
                    record: "category",
                    id: cat.id.to_string(),
                });
            }
        }

        let mut warnings = Vec::new();
        let mut seen = BTreeSet::new();
        let mut boxes = Vec::with_capacity(annotations.len());
        for ann in annotations {
            if !seen.insert(ann.id) {
                return Err(Error::DuplicateId {
                    record: "annotation",
                    id: ann.id.to_string(),
                });
            }
            let Some(img) = image_map.get(&ann.image_id) else {
                return Err(Error::DanglingReference {
                    record: "annotation",
                    id: ann.id,
                    target: "image",
                    target_id: ann.image_id,
                });
            };
            if !category_map.contains_key(&ann.category_id) {
                return Err(Error::DanglingReference {
                    record: "annotation",
                    id: ann.id,
                    target: "category",
                    target_id: ann.category_id,
                });
            }
            let [x, y, w, h] = ann.bbox;
            if w < 0.0 || h < 0.0 {
                return Err(Error::NegativeExtent { id: ann.id });
            }
            let bbox = BBox::from_xywh(x, y, w, h)
                .map_err(|e| Error::InvalidBox(format!("annotation {}: {e}", ann.id)))?;
            let bbox = if bbox.within(img.width, img.height) {
                bbox
            } else {
                // a box written back after clamping can overshoot by rounding
                // alone; that is fixed silently
                let slack = 1e-9 * img.width.max(img.height).max(1.0);
                let shrunk = BBox {
                    x_min: bbox.x_min + slack,
                    y_min: bbox.y_min + slack,
                    x_max: bbox.x_max - slack,
                    y_max: bbox.y_max - slack,
                };
                if !shrunk.within(img.width, img.height) {
                    warnings.push(LoadWarning::ClampedBox {
                        annotation_id: ann.id,
                        original: ann.bbox,
                    });
                }
                bbox.clamp_to(img.width, img.height)
            };
            boxes.push(GroundTruthBox {
                annotation_id: ann.id,
                image_id: ann.image_id,
                category_id: ann.category_id,
                bbox,
            });
        }

        Ok((
            DatasetIndex {
                images: image_map,
                categories: category_map,
                annotations: boxes,
            },
            warnings,
        ))
    }

    pub fn images(&self) -> &BTreeMap<u64, ImageInfo> {
        &self.images
    }

    pub fn categories(&self) -> &BTreeMap<u64, String> {
        &self.categories
    }

    pub fn annotations(&self) -> &[GroundTruthBox] {
        &self.annotations
    }

    /// Category ids that own at least one annotation, ascending.
    pub fn annotated_classes(&self) -> BTreeSet<u64> {
        self.annotations.iter().map(|a| a.category_id).collect()
    }

    /// Same images and categories with a different annotation list.
    pub fn with_annotations(&self, annotations: Vec<GroundTruthBox>) -> Result<Self> {
        for a in &annotations {
            if !self.images.contains_key(&a.image_id) {
                return Err(Error::DanglingReference {
                    record: "annotation",
                    id: a.annotation_id,
                    target: "image",
                    target_id: a.image_id,
                });
            }
            if !self.categories.contains_key(&a.category_id) {
                return Err(Error::DanglingReference {
                    record: "annotation",
                    id: a.annotation_id,
                    target: "category",
                    target_id: a.category_id,
                });
            }
        }
        Ok(DatasetIndex {
            images: self.images.clone(),
            categories: self.categories.clone(),
            annotations,
        })
    }

    pub fn raw_images(&self) -> Vec<ImageInfo> {
        self.images.values().cloned().collect()
    }

    pub fn raw_categories(&self) -> Vec<Category> {
        self.categories
            .iter()
            .map(|(id, name)| Category {
                id: *id,
                name: name.clone(),
            })
            .collect()
    }

    pub fn raw_annotations(&self) -> Vec<RawAnnotation> {
        self.annotations
            .iter()
            .map(|a| RawAnnotation {
                id: a.annotation_id,
                image_id: a.image_id,
                category_id: a.category_id,
                bbox: a.bbox.to_xywh(),
            })
            .collect()
    }
}

/// What an embedding was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    /// A cropped object instance.
    Instance,
    /// A whole image.
    Image,
    /// A class-name text prompt.
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub record_id: String,
    pub class_id: Option<u64>,
    pub kind: EmbeddingKind,
    pub vector: Vec<f64>,
    /// Set for all-zero vectors, which are never normalized and have cosine 0 with anything.
    pub zero: bool,
}

impl EmbeddingRecord {
    pub fn new(
        record_id: impl Into<String>,
        class_id: Option<u64>,
        kind: EmbeddingKind,
        vector: Vec<f64>,
    ) -> Self {
        let zero = vector.iter().all(|v| *v == 0.0);
        EmbeddingRecord {
            record_id: record_id.into(),
            class_id,
            kind,
            vector,
            zero,
        }
    }
}

/// Embeddings of one file, all of dimension `dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    dim: usize,
    records: Vec<EmbeddingRecord>,
}

impl EmbeddingTable {
    pub fn new(records: Vec<EmbeddingRecord>, normalize: bool) -> Result<Self> {
        let dim = records.first().map_or(0, |r| r.vector.len());
        if !records.is_empty() && dim == 0 {
            return Err(Error::dims(
                format!("record {}", records[0].record_id),
                1,
                0,
            ));
        }
        let mut ids = BTreeSet::new();
        let mut out = Vec::with_capacity(records.len());
        for mut rec in records {
            if rec.vector.len() != dim {
                return Err(Error::dims(
                    format!("record {}", rec.record_id),
                    dim,
                    rec.vector.len(),
                ));
            }
            if rec.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("record {}", rec.record_id)));
            }
            if !ids.insert(rec.record_id.clone()) {
                return Err(Error::DuplicateId {
                    record: "embedding",
                    id: rec.record_id,
                });
            }
            rec.zero = rec.vector.iter().all(|v| *v == 0.0);
            if normalize {
                if let Some(unit) = linalg::l2_normalized(&rec.vector) {
                    rec.vector = unit;
                }
            }
            out.push(rec);
        }
        Ok(EmbeddingTable { dim, records: out })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn of_kind(&self, kind: EmbeddingKind) -> impl Iterator<Item = &EmbeddingRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    /// Distinct class ids carried by the records, ascending.
    pub fn class_ids(&self) -> BTreeSet<u64> {
        self.records.iter().filter_map(|r| r.class_id).collect()
    }
}

/// Scores over the N classes of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    values: Vec<f64>,
    normalized: bool,
}

impl ProbVector {
    /// Unnormalized scores (e.g. negative prototype logits).
    pub fn raw(values: Vec<f64>) -> Self {
        ProbVector {
            values,
            normalized: false,
        }
    }

    /// A probability distribution: entries `>= 0` summing to 1 within 1e-9.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::param("probabilities", "entries must be >= 0"));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::param(
                "probabilities",
                format!("entries sum to {total}, not 1"),
            ));
        }
        Ok(ProbVector {
            values,
            normalized: true,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}
