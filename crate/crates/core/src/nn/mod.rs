//! Minimal dense-tensor and reverse-mode automatic differentiation core:
//! f64 tensors, a tape-based graph with the layer set the classifier
//! needs, Adam, and the cosine learning-rate schedule.

pub mod graph;
pub mod optim;
pub mod tensor;

pub use graph::{Graph, NodeId};
pub use optim::{cosine_lr, AdamState};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("stale graph: backward already ran; rebuild the forward pass first")]
    StaleGraph,
    #[error("loss must be scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("schedule exhausted: epoch {t} past total {total}")]
    ScheduleExhausted { t: usize, total: usize },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("cross-entropy needs at least one unmasked position")]
    AllMasked,
}

pub(crate) fn shape_err(op: &'static str, detail: String) -> NnError {
    NnError::Shape { op, detail }
}
