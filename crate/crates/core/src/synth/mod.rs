//! Phantom generator: paired synthetic CT volumes, centerlines, pullback
//! label sequences, reference pairs, and analytic ground-truth alignments.
//!
//! All arc positions are snapped to the MPR slice grid and per-interval
//! frame counts are integers, so the ground-truth transform ratios are
//! exact rationals and the alignment stage can be checked bit-exactly.
//! Intensity signatures are stylized, not radiologically calibrated; the
//! goal is pipeline verification.

mod generate;
mod plan;
mod render;

pub use generate::{gen_dataset, patient_specs, write_bundle, DatasetMode, GeneratorConfig, SynthManifest};
pub use plan::{gen_alignment_case, AlignmentCase};
pub use render::gen_phantom;

use crate::align::{AlignedLabels, AlignmentMap};
use crate::volio::{Centerline, LabelSeq, OctClass, ReferencePairs, Volume3D};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("internal generation failure: {0}")]
    Internal(String),
}

/// Vessel trajectory family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VesselPath {
    /// Gently tilted straight segment.
    Line,
    /// Corkscrew around the z axis.
    Helix { radius_mm: f64, pitch_mm: f64 },
    /// Catmull-Rom spline through control points (≥ 4).
    Spline { control: Vec<[f64; 3]> },
}

/// A contiguous stretch of one tissue class along the vessel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaqueRun {
    pub class: OctClass,
    pub start_mm: f64,
    pub end_mm: f64,
}

/// Full phantom description. Run boundaries and the pullback window are
/// snapped to the MPR slice grid during generation; the realized geometry
/// is returned in the bundle's ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub path: VesselPath,
    pub vessel_length_mm: f64,
    pub lumen_radius_mm: f64,
    /// Non-overlapping, ordered; gaps are healthy.
    pub runs: Vec<PlaqueRun>,
    pub oct_thickness_mm: f64,
    pub mpr_thickness_mm: f64,
    pub ccta_spacing_mm: [f64; 3],
    /// Requested slices-per-frame ratio per reference interval (cycled);
    /// realized ratios are the nearest exact rationals.
    pub stretches: Vec<f64>,
    /// Arc range the pullback covers, in mm.
    pub pullback_mm: (f64, f64),
    /// Gaussian intensity noise (HU-like units).
    pub noise_sigma: f64,
    /// Context-dependent variant: stent walls render like fibrous tissue
    /// except for sparse bright strut flashes.
    pub ambiguous_stent: bool,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            path: VesselPath::Line,
            vessel_length_mm: 70.0,
            lumen_radius_mm: 1.6,
            runs: Vec::new(),
            oct_thickness_mm: 0.2,
            mpr_thickness_mm: 0.5,
            ccta_spacing_mm: [0.45, 0.4, 0.4],
            stretches: vec![0.4],
            pullback_mm: (5.0, 65.0),
            noise_sigma: 4.0,
            ambiguous_stent: false,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.vessel_length_mm > 5.0) {
            return Err(SynthError::InvalidSpec(format!(
                "vessel length {} mm too short",
                self.vessel_length_mm
            )));
        }
        for t in [self.oct_thickness_mm, self.mpr_thickness_mm] {
            if !(t > 0.0) {
                return Err(SynthError::InvalidSpec(format!("non-positive thickness {t}")));
            }
        }
        if !(self.lumen_radius_mm > 0.0) {
            return Err(SynthError::InvalidSpec("non-positive lumen radius".into()));
        }
        if self.stretches.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(SynthError::InvalidSpec(format!(
                "stretch factors must be positive, got {:?}",
                self.stretches
            )));
        }
        let (a, b) = self.pullback_mm;
        if !(a >= 0.0 && b <= self.vessel_length_mm && b > a) {
            return Err(SynthError::InvalidSpec(format!(
                "pullback ({a}, {b}) outside vessel [0, {}]",
                self.vessel_length_mm
            )));
        }
        let mut prev_end = 0.0f64;
        for r in &self.runs {
            if !(r.start_mm >= 0.0 && r.end_mm <= self.vessel_length_mm && r.end_mm > r.start_mm) {
                return Err(SynthError::InvalidSpec(format!(
                    "run {:?} outside vessel extent",
                    r
                )));
            }
            if r.start_mm < prev_end {
                return Err(SynthError::InvalidSpec(format!(
                    "run starting at {} mm overlaps the previous run",
                    r.start_mm
                )));
            }
            prev_end = r.end_mm;
        }
        Ok(())
    }
}

/// Analytic ground truth shipped with every phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// The true frame→slice transform (realized ratios).
    pub alignment: AlignmentMap,
    /// The true MPR label strip over the aligned segment.
    pub mpr_labels: AlignedLabelsSer,
    /// Realized class partition of the whole vessel, in slice indices:
    /// (class, start_slice, end_slice).
    pub vessel_segments: Vec<(u8, usize, usize)>,
}

/// Serializable mirror of [`AlignedLabels`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedLabelsSer {
    pub offset: usize,
    pub labels: LabelSeq,
}

impl From<AlignedLabels> for AlignedLabelsSer {
    fn from(a: AlignedLabels) -> Self {
        Self {
            offset: a.offset,
            labels: a.labels,
        }
    }
}

/// A fully rendered phantom.
#[derive(Debug, Clone)]
pub struct PhantomBundle {
    pub ccta: Volume3D,
    pub centerline: Centerline,
    pub oct_labels: LabelSeq,
    pub references: ReferencePairs,
    pub truth: GroundTruth,
}
