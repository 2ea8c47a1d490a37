//! Core library for transferring per-frame pullback annotations onto
//! straightened multiplanar reformats (MPR) of CT angiography volumes and
//! training a windowed sequence classifier on the transferred labels.
//!
//! Module map:
//! - [`volio`] — domain types (volumes, centerlines, label sequences,
//!   reference pairs) and their on-disk formats.
//! - [`mprrec`] — straightened MPR reconstruction: centerline resampling,
//!   rotation-minimizing frames, trilinear resampling.
//! - [`align`] — reference-location label alignment from pullback frame
//!   space into MPR slice space.
//! - [`dataset`] — windowing aligned volumes into model-ready sequences,
//!   cross-validation folds, and the coarse 3-class mapping.
//! - [`nn`] — dense f64 tensors, reverse-mode autodiff, Adam, cosine
//!   schedule.
//! - [`model`] — the 3D-CNN + Transformer sequence classifier, training
//!   and inference loops, checkpoints.
//! - [`metrics`] — accuracy, one-vs-rest AUC, confusion matrices, Cohen's
//!   kappa, agreement reports.
//! - [`synth`] — phantom generator producing paired volumes, labels,
//!   references, and analytic ground-truth alignments.

pub mod align;
pub mod dataset;
pub(crate) mod geom;
pub mod metrics;
pub mod model;
pub mod mprrec;
pub mod nn;
pub mod synth;
pub mod volio;
