//! Readers and writers for the on-disk formats: COCO-subset annotation JSON,
//! COCO results JSON, JSON-lines embeddings, proposal lists, nine-mAP tables
//! and refinement projection matrices.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cdfsod_core::eval::NineMaps;
use cdfsod_core::linalg::Matrix;
use cdfsod_core::protofusion::{Proposal, RefineProjections};
use cdfsod_core::{
    BBox, Category, DatasetIndex, Detection, EmbeddingKind, EmbeddingRecord, EmbeddingTable,
    ImageInfo, LoadWarning, RawAnnotation,
};
use serde_json::{json, Map, Value};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Invalid {
        path: PathBuf,
        #[source]
        source: cdfsod_core::Error,
    },
}

impl IoError {
    fn format(path: &Path, message: impl Into<String>) -> Self {
        IoError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    fn invalid(path: &Path, source: cdfsod_core::Error) -> Self {
        IoError::Invalid {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for failures of the file system rather than of the content.
    pub fn is_io(&self) -> bool {
        matches!(self, IoError::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, IoError>;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_json(path: &Path) -> Result<Value> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| IoError::format(path, format!("invalid JSON: {e}")))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string(value: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable report");
    s.push('\n');
    s
}

/// Field accessors that name the record in every error.
struct Fields<'a> {
    path: &'a Path,
    what: String,
    obj: &'a Map<String, Value>,
}

impl<'a> Fields<'a> {
    fn new(path: &'a Path, what: String, v: &'a Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| IoError::format(path, format!("{what}: expected an object")))?;
        Ok(Fields { path, what, obj })
    }

    fn renamed(mut self, what: String) -> Self {
        self.what = what;
        self
    }

    fn get(&self, key: &str) -> Result<&'a Value> {
        self.obj
            .get(key)
            .ok_or_else(|| IoError::format(self.path, format!("{}: missing key `{key}`", self.what)))
    }

    fn err(&self, key: &str, expected: &str) -> IoError {
        IoError::format(self.path, format!("{}: `{key}` must be {expected}", self.what))
    }

    fn id(&self, key: &str) -> Result<u64> {
        let v = self.get(key)?;
        v.as_u64()
            .or_else(|| {
                v.as_f64()
                    .filter(|f| f.fract() == 0.0 && *f >= 0.0 && *f <= u64::MAX as f64)
                    .map(|f| f as u64)
            })
            .ok_or_else(|| self.err(key, "a non-negative integer"))
    }

    fn real(&self, key: &str) -> Result<f64> {
        self.get(key)?
            .as_f64()
            .ok_or_else(|| self.err(key, "a number"))
    }

    fn string(&self, key: &str) -> Result<String> {
        self.get(key)?
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| self.err(key, "a string"))
    }

    fn reals(&self, key: &str) -> Result<Vec<f64>> {
        real_array(self.get(key)?).ok_or_else(|| self.err(key, "an array of numbers"))
    }

    fn xywh(&self, key: &str) -> Result<[f64; 4]> {
        let v = self.reals(key)?;
        <[f64; 4]>::try_from(v).map_err(|_| self.err(key, "[x, y, width, height]"))
    }
}

fn real_array(v: &Value) -> Option<Vec<f64>> {
    v.as_array()?.iter().map(Value::as_f64).collect()
}

fn array<'a>(path: &Path, root: &'a Value, key: &str) -> Result<&'a Vec<Value>> {
    root.get(key)
        .ok_or_else(|| IoError::format(path, format!("missing key `{key}`")))?
        .as_array()
        .ok_or_else(|| IoError::format(path, format!("`{key}` must be an array")))
}

fn parse_dataset(path: &Path, root: &Value) -> Result<(DatasetIndex, Vec<LoadWarning>)> {
    if !root.is_object() {
        return Err(IoError::format(path, "expected a JSON object"));
    }
    let mut images = Vec::new();
    for (i, v) in array(path, root, "images")?.iter().enumerate() {
        let f = Fields::new(path, format!("images[{i}]"), v)?;
        let id = f.id("id")?;
        let f = f.renamed(format!("image {id}"));
        images.push(ImageInfo {
            id,
            width: f.real("width")?,
            height: f.real("height")?,
            file_name: f.string("file_name")?,
        });
    }
    let mut annotations = Vec::new();
    for (i, v) in array(path, root, "annotations")?.iter().enumerate() {
        let f = Fields::new(path, format!("annotations[{i}]"), v)?;
        let id = f.id("id")?;
        let f = f.renamed(format!("annotation {id}"));
        annotations.push(RawAnnotation {
            id,
            image_id: f.id("image_id")?,
            category_id: f.id("category_id")?,
            bbox: f.xywh("bbox")?,
        });
    }
    let mut categories = Vec::new();
    for (i, v) in array(path, root, "categories")?.iter().enumerate() {
        let f = Fields::new(path, format!("categories[{i}]"), v)?;
        let id = f.id("id")?;
        let f = f.renamed(format!("category {id}"));
        categories.push(Category {
            id,
            name: f.string("name")?,
        });
    }
    DatasetIndex::from_parts(images, categories, annotations).map_err(|e| IoError::invalid(path, e))
}

/// Loads a COCO-subset annotation file. Boxes outside their image are
/// clamped and returned as warnings.
pub fn load_dataset(path: &Path) -> Result<(DatasetIndex, Vec<LoadWarning>)> {
    parse_dataset(path, &read_json(path)?)
}

/// Parses annotation JSON already in memory; `origin` only labels errors.
pub fn parse_dataset_str(origin: &Path, text: &str) -> Result<(DatasetIndex, Vec<LoadWarning>)> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| IoError::format(origin, format!("invalid JSON: {e}")))?;
    parse_dataset(origin, &root)
}

pub fn dataset_to_json(ds: &DatasetIndex) -> Value {
    let images: Vec<Value> = ds
        .raw_images()
        .into_iter()
        .map(|i| json!({"id": i.id, "width": i.width, "height": i.height, "file_name": i.file_name}))
        .collect();
    let annotations: Vec<Value> = ds
        .raw_annotations()
        .into_iter()
        .map(|a| json!({"id": a.id, "image_id": a.image_id, "category_id": a.category_id, "bbox": a.bbox}))
        .collect();
    let categories: Vec<Value> = ds
        .raw_categories()
        .into_iter()
        .map(|c| json!({"id": c.id, "name": c.name}))
        .collect();
    json!({"images": images, "annotations": annotations, "categories": categories})
}

fn parse_detection(path: &Path, i: usize, v: &Value) -> Result<Detection> {
    let f = Fields::new(path, format!("detection {i}"), v)?;
    let [x, y, w, h] = f.xywh("bbox")?;
    let bbox = BBox::from_xywh(x, y, w, h).map_err(|e| IoError::invalid(path, e))?;
    let det = Detection::new(f.id("image_id")?, f.id("category_id")?, bbox, f.real("score")?)
        .map_err(|e| IoError::format(path, format!("detection {i}: {e}")))?;
    Ok(match f.obj.get("source").and_then(Value::as_str) {
        Some(src) => det.with_source(src),
        None => det,
    })
}

/// Loads a COCO results array `[{image_id, category_id, bbox, score}]`.
pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let root = read_json(path)?;
    let items = root
        .as_array()
        .ok_or_else(|| IoError::format(path, "expected a JSON array of detections"))?;
    items
        .iter()
        .enumerate()
        .map(|(i, v)| parse_detection(path, i, v))
        .collect()
}

pub fn detections_to_json(dets: &[Detection]) -> Value {
    Value::Array(
        dets.iter()
            .map(|d| {
                let mut obj = json!({
                    "image_id": d.image_id,
                    "category_id": d.category_id,
                    "bbox": d.bbox.to_xywh(),
                    "score": d.score(),
                });
                if let Some(src) = &d.source_id {
                    obj["source"] = json!(src);
                }
                obj
            })
            .collect(),
    )
}

fn parse_kind(path: &Path, line: usize, s: &str) -> Result<EmbeddingKind> {
    match s {
        "instance" => Ok(EmbeddingKind::Instance),
        "image" => Ok(EmbeddingKind::Image),
        "text" => Ok(EmbeddingKind::Text),
        other => Err(IoError::format(
            path,
            format!("line {line}: unknown kind `{other}` (expected instance, image or text)"),
        )),
    }
}

/// Parses one JSON-lines embedding file. Lines that are blank are skipped.
pub fn parse_embeddings(path: &Path, text: &str, normalize: bool) -> Result<EmbeddingTable> {
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line)
            .map_err(|e| IoError::format(path, format!("line {line_no}: invalid JSON: {e}")))?;
        let f = Fields::new(path, format!("line {line_no}"), &v)?;
        let id = match f.get("id")? {
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            _ => return Err(f.err("id", "a string or number")),
        };
        let class_id = match f.obj.get("class_id") {
            None | Some(Value::Null) => None,
            Some(_) => Some(f.id("class_id")?),
        };
        let kind = parse_kind(path, line_no, &f.string("kind")?)?;
        let vector = f.reals("vector")?;
        records.push(EmbeddingRecord::new(id, class_id, kind, vector));
    }
    EmbeddingTable::new(records, normalize).map_err(|e| IoError::invalid(path, e))
}

pub fn load_embeddings(path: &Path, normalize: bool) -> Result<EmbeddingTable> {
    parse_embeddings(path, &read_text(path)?, normalize)
}

/// Loads `[{image_id, bbox, score, vector}]` region proposals.
pub fn load_proposals(path: &Path) -> Result<Vec<Proposal>> {
    let root = read_json(path)?;
    let items = root
        .as_array()
        .ok_or_else(|| IoError::format(path, "expected a JSON array of proposals"))?;
    let mut out = Vec::with_capacity(items.len());
    for (i, v) in items.iter().enumerate() {
        let f = Fields::new(path, format!("proposal {i}"), v)?;
        let [x, y, w, h] = f.xywh("bbox")?;
        out.push(Proposal {
            image_id: f.id("image_id")?,
            bbox: BBox::from_xywh(x, y, w, h).map_err(|e| IoError::invalid(path, e))?,
            score: f.real("score")?,
            vector: f.reals("vector")?,
        });
    }
    Ok(out)
}

/// Reads the nine mAPs either as a flat `{"D1_1shot": ..}` object or nested
/// under a `maps` key (the shape of a previously written score report).
pub fn load_nine_maps(path: &Path) -> Result<NineMaps> {
    let root = read_json(path)?;
    let obj = root
        .get("maps")
        .unwrap_or(&root)
        .as_object()
        .ok_or_else(|| IoError::format(path, "expected an object of nine mAP entries"))?;
    let mut entries = Vec::with_capacity(obj.len());
    for (k, v) in obj {
        let x = v
            .as_f64()
            .ok_or_else(|| IoError::format(path, format!("`{k}` must be a number")))?;
        entries.push((k.as_str(), x));
    }
    NineMaps::from_entries(entries).map_err(|e| IoError::invalid(path, e))
}

fn parse_matrix(path: &Path, key: &str, v: &Value) -> Result<Matrix> {
    let rows = v
        .as_array()
        .ok_or_else(|| IoError::format(path, format!("`{key}` must be an array of rows")))?;
    let rows: Vec<Vec<f64>> = rows
        .iter()
        .map(real_array)
        .collect::<Option<_>>()
        .ok_or_else(|| IoError::format(path, format!("`{key}` rows must be number arrays")))?;
    Matrix::from_rows(&rows).map_err(|e| IoError::invalid(path, e))
}

/// Loads `{w_q, w_k1, w_k2, w_v, gate, gate_bias}`; missing matrices
/// default to the identity and a missing bias to zeros.
pub fn load_projections(path: &Path, dim: usize) -> Result<RefineProjections> {
    let root = read_json(path)?;
    let obj = root
        .as_object()
        .ok_or_else(|| IoError::format(path, "expected an object of matrices"))?;
    let mut proj = RefineProjections::identity(dim);
    let mut mats: BTreeMap<&str, &mut Matrix> = BTreeMap::new();
    mats.insert("w_q", &mut proj.w_q);
    mats.insert("w_k1", &mut proj.w_k1);
    mats.insert("w_k2", &mut proj.w_k2);
    mats.insert("w_v", &mut proj.w_v);
    mats.insert("gate", &mut proj.gate);
    for (key, v) in obj {
        if key == "gate_bias" {
            continue;
        }
        let slot = mats
            .get_mut(key.as_str())
            .ok_or_else(|| IoError::format(path, format!("unknown matrix `{key}`")))?;
        **slot = parse_matrix(path, key, v)?;
    }
    if let Some(b) = obj.get("gate_bias") {
        proj.gate_bias =
            real_array(b).ok_or_else(|| IoError::format(path, "`gate_bias` must be numbers"))?;
    }
    Ok(proj)
}
