//! Pure computational core for cross-domain few-shot detection experiments.
//!
//! Everything here is `no_std` + `alloc`: domain types, box geometry and NMS,
//! COCO-style average precision and the weighted challenge score, N-way K-shot
//! episode sampling, prototype/similarity math over precomputed embeddings,
//! domain-gap statistics, and the pseudo-label refinement loop. File formats,
//! logging and the command line live in the `cdfsod` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod detops;
pub mod domainstats;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod protofusion;
pub mod selftrain;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    BBox, Category, DatasetIndex, Detection, EmbeddingKind, EmbeddingRecord, EmbeddingTable,
    GroundTruthBox, ImageInfo, LoadWarning, ProbVector, RawAnnotation,
};
