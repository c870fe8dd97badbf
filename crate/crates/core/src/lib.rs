//! Source-free adaptation of a segmentation network by seed pseudo-label
//! fusion, diffusion-based label propagation and self-training.
//!
//! Stages talk to each other through the on-disk formats in [`formats`];
//! [`pipeline`] chains them and records per-iteration metrics.

pub mod checkpoint;
pub mod codec;
pub mod diffprop;
pub mod evalkit;
mod error;
pub mod formats;
pub mod nn;
pub mod pipeline;
pub mod seedgen;
pub mod segmodel;
pub mod synthdata;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    argmax, ClassField, ConfidenceRecord, DiffusionState, ImageTensor, LabelMap, ProbMap, IGNORE, MAX_CLASSES,
};
