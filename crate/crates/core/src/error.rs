use alloc::string::String;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Validation and shape errors raised by the core routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid score {score} on detection (image {image_id}); scores must lie in [0, 1]")]
    InvalidScore { image_id: u64, score: f64 },
    #[error("{record} {id}: references unknown {target} {target_id}")]
    DanglingReference {
        record: &'static str,
        id: u64,
        target: &'static str,
        target_id: u64,
    },
    #[error("annotation {id}: negative width or height")]
    NegativeExtent { id: u64 },
    #[error("image {id}: width and height must be positive")]
    InvalidImageSize { id: u64 },
    #[error("duplicate {record} id {id}")]
    DuplicateId { record: &'static str, id: String },
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("detections from source `{0}` have no reliability weight")]
    UnknownSource(String),
    #[error("class {class_id} has {available} instances, fewer than k = {k}")]
    InfeasibleEpisode {
        class_id: u64,
        available: usize,
        k: usize,
    },
    #[error("nothing to evaluate: ground truth has no annotations")]
    EmptyGroundTruth,
    #[error("missing score entry {0}")]
    MissingEntry(String),
    #[error("shape mismatch at {stage}: {detail}")]
    ShapeMismatch { stage: &'static str, detail: String },
    #[error("mask is all zero")]
    EmptyMask,
    #[error("total weight is zero")]
    ZeroWeight,
    #[error("record {0} has no class id")]
    MissingClass(String),
    #[error("class {0} has more than one text embedding")]
    DuplicateText(u64),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            found,
        }
    }
}
