//! The windowed sequence classifier: a shallow 3D CNN embedding per
//! window, an optional Transformer encoder over the window sequence, a
//! per-position classification head, and the training/inference loops.

mod checkpoint;
mod classifier;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use classifier::{BatchInput, SequenceClassifier};
pub use train::{train_fold, EpochStats, TrainConfig, TrainReport};

use crate::nn::NnError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("sequence {patient_id} is empty")]
    EmptySequence { patient_id: String },
    #[error("window of {got} voxels does not match configured {n}×{d}×{d}")]
    WindowShape { got: usize, n: usize, d: usize },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: u8, classes: usize },
    #[error("training diverged at epoch {epoch} (non-finite loss); last good checkpoint attached")]
    DivergenceDetected {
        epoch: usize,
        last_checkpoint: Box<SequenceClassifier>,
    },
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("patients appear in both train and validation sets: {0:?}")]
    LeakedPatients(Vec<String>),
    #[error("checkpoint i/o error at {path}: {reason}")]
    CheckpointIo { path: String, reason: String },
}

/// Architecture hyperparameters. `window_slices`/`window_size` must match
/// the dataset the model runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Slices per window (n).
    pub window_slices: usize,
    /// Cross-section edge (d).
    pub window_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub cnn_channels: Vec<usize>,
    pub classes: usize,
    pub dropout: f64,
    /// Sinusoidal positional encoding on the window sequence.
    pub positional_encoding: bool,
    /// With `false`, the encoder is skipped and the head reads the CNN
    /// embedding directly (the context-free baseline).
    pub use_transformer: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window_slices: 12,
            window_size: 21,
            d_model: 64,
            heads: 4,
            encoder_layers: 2,
            cnn_channels: vec![8, 16],
            classes: 6,
            dropout: 0.1,
            positional_encoding: true,
            use_transformer: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.classes < 2 {
            return Err(ModelError::BadConfig(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.cnn_channels.is_empty() {
            return Err(ModelError::BadConfig("cnn_channels is empty".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        let (nf, df) = self.pooled_dims();
        if nf == 0 || df == 0 {
            return Err(ModelError::BadConfig(format!(
                "window {}×{}×{} pools away after {} conv blocks",
                self.window_slices,
                self.window_size,
                self.window_size,
                self.cnn_channels.len()
            )));
        }
        Ok(())
    }

    /// Spatial dims after the conv/pool stack.
    pub fn pooled_dims(&self) -> (usize, usize) {
        let mut n = self.window_slices;
        let mut d = self.window_size;
        for _ in &self.cnn_channels {
            n /= 2;
            d /= 2;
        }
        (n, d)
    }

    /// Flattened embedding width entering the projection layer.
    pub fn flatten_width(&self) -> usize {
        let (n, d) = self.pooled_dims();
        self.cnn_channels.last().copied().unwrap_or(0) * n * d * d
    }
}
