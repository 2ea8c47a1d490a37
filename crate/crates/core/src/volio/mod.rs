//! Domain types and bit-exact file I/O.
//!
//! On-disk formats (documented with byte-level examples in `docs/FORMATS.md`):
//! - volumes: a JSON header next to a raw little-endian float32 blob,
//!   z-major;
//! - centerlines: CSV of world-mm points;
//! - label sequences: CSV with `# thickness_mm=` / `# taxonomy=` comment
//!   lines;
//! - reference pairs: CSV of (pullback frame index, MPR slice index).

mod centerline;
mod labels;
mod references;
mod volume;

pub use centerline::Centerline;
pub use labels::{CctaClass, LabelSeq, OctClass, Taxonomy};
pub use references::ReferencePairs;
pub use volume::{Volume3D, VolumeHeader};

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("unsupported dtype {dtype:?} (only \"float32\" volumes are supported)")]
    UnsupportedFormat { dtype: String },
    #[error("raw file {path} holds {actual} bytes, expected {expected}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("non-finite value at flat index {index}")]
    CorruptData { index: usize },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("invalid centerline: {0}")]
    InvalidCenterline(String),
    #[error("malformed labels in {path} (line {line}): {reason}")]
    MalformedLabels {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("unknown class name {name:?} for taxonomy {taxonomy:?}")]
    UnknownClass { name: String, taxonomy: Taxonomy },
    #[error("invalid label sequence: {0}")]
    InvalidLabels(String),
    #[error("reference file {path} has no data rows")]
    NoReferences { path: PathBuf },
    #[error("references not strictly monotone after sorting by pullback index: {reason}")]
    NonMonotoneReferences { reason: String },
    #[error("malformed references in {path} (line {line}): {reason}")]
    MalformedReferences {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> VolIoError {
    VolIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}
