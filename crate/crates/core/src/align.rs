//! Piecewise-uniform label alignment from pullback frame space into MPR
//! slice space.
//!
//! The transform is built from manually screened reference pairs: each
//! reference interval gets its own slices-per-frame ratio, the head and
//! tail reuse their neighboring interval's ratio (or the thickness-derived
//! base ratio when only one reference exists), and segment endpoints in
//! MPR space are synthesized from the extended ratios. Labels are then
//! transferred interval by interval with a majority merge.

use crate::volio::{LabelSeq, OctClass, ReferencePairs, Taxonomy, VolIoError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("slice thickness must be positive, got {0}")]
    InvalidThickness(f64),
    #[error("degenerate reference interval: zero frame width between ({0}, {1}) and ({2}, {3})")]
    DegenerateInterval(usize, usize, usize, usize),
    #[error("ratio vector holds {got} entries, expected {expected} for {pairs} reference pairs")]
    MismatchedRatios {
        got: usize,
        expected: usize,
        pairs: usize,
    },
    #[error("unalignable geometry: {0}")]
    UnalignableGeometry(String),
    #[error("cannot merge an empty label segment")]
    EmptySegment,
    #[error("label sequence length {got} does not match the alignment's frame count {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("label sequence must use the fine 6-class taxonomy")]
    WrongTaxonomy,
    #[error(transparent)]
    References(#[from] VolIoError),
}

/// Per-interval slices-per-frame ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioVector {
    gammas: Vec<f64>,
}

impl RatioVector {
    pub fn new(gammas: Vec<f64>) -> Self {
        debug_assert!(gammas.iter().all(|&g| g > 0.0 && g.is_finite()));
        Self { gammas }
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn len(&self) -> usize {
        self.gammas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gammas.is_empty()
    }
}

/// Which synthesized endpoint a clamp adjusted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampedEnd {
    Start,
    End,
}

/// Record of an out-of-range endpoint pulled back into [0, mpr_len].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClampEvent {
    pub end: ClampedEnd,
    pub requested: i64,
    pub clamped_to: usize,
}

/// The resolved frame→slice transform: reference pairs augmented with the
/// synthesized segment start and end, one ratio per augmented interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMap {
    /// (frame index, slice index) pairs; first frame index is 0 and the
    /// last is the full pullback length.
    pub augmented_pairs: Vec<(usize, usize)>,
    /// One ratio per augmented interval.
    pub gammas: RatioVector,
    pub clamp_log: Vec<ClampEvent>,
    pub oct_len: usize,
    pub mpr_len: usize,
}

impl AlignmentMap {
    pub fn segment_start(&self) -> usize {
        self.augmented_pairs.first().expect("non-empty").1
    }

    pub fn segment_end(&self) -> usize {
        self.augmented_pairs.last().expect("non-empty").1
    }

    /// Validates the map's structural invariants: frames strictly
    /// increasing from 0 to oct_len, slices non-decreasing within
    /// [0, mpr_len] (zero-width only at head/tail).
    pub fn validate(&self) -> Result<(), AlignError> {
        let pairs = &self.augmented_pairs;
        if pairs.len() < 2 {
            return Err(AlignError::UnalignableGeometry(
                "augmented map needs at least two pairs".to_string(),
            ));
        }
        if pairs[0].0 != 0 || pairs[pairs.len() - 1].0 != self.oct_len {
            return Err(AlignError::UnalignableGeometry(format!(
                "augmented frame range [{}, {}] does not span [0, {}]",
                pairs[0].0,
                pairs[pairs.len() - 1].0,
                self.oct_len
            )));
        }
        for (i, w) in pairs.windows(2).enumerate() {
            let ((o0, m0), (o1, m1)) = (w[0], w[1]);
            if o1 <= o0 {
                return Err(AlignError::UnalignableGeometry(format!(
                    "frame indices not strictly increasing at interval {i}"
                )));
            }
            if m1 < m0 {
                return Err(AlignError::UnalignableGeometry(format!(
                    "slice indices decrease at interval {i}"
                )));
            }
            let interior = i > 0 && i + 1 < pairs.len() - 1;
            if interior && m1 == m0 {
                return Err(AlignError::UnalignableGeometry(format!(
                    "interior interval {i} has zero slice width"
                )));
            }
            if m1 > self.mpr_len {
                return Err(AlignError::UnalignableGeometry(format!(
                    "slice index {m1} beyond MPR length {}",
                    self.mpr_len
                )));
            }
        }
        if self.gammas.len() != pairs.len() - 1 {
            return Err(AlignError::MismatchedRatios {
                got: self.gammas.len(),
                expected: pairs.len() - 1,
                pairs: pairs.len(),
            });
        }
        Ok(())
    }
}

/// Round half away from zero. `f64::round` already implements this; the
/// wrapper pins the contract for cross-language determinism.
#[inline]
pub fn round_half_away(x: f64) -> i64 {
    x.round() as i64
}

/// Thickness-derived base ratio: pullback frame thickness over MPR slice
/// thickness.
pub fn base_ratio(oct_thickness_mm: f64, mpr_thickness_mm: f64) -> Result<f64, AlignError> {
    for t in [oct_thickness_mm, mpr_thickness_mm] {
        if !(t > 0.0) || !t.is_finite() {
            return Err(AlignError::InvalidThickness(t));
        }
    }
    Ok(oct_thickness_mm / mpr_thickness_mm)
}

/// Per-interval ratios between consecutive reference pairs: slice interval
/// over frame interval. A single pair yields an empty vector.
pub fn interval_ratios(refs: &ReferencePairs) -> Result<RatioVector, AlignError> {
    let mut gammas = Vec::with_capacity(refs.len().saturating_sub(1));
    for w in refs.pairs().windows(2) {
        let ((o0, m0), (o1, m1)) = (w[0], w[1]);
        let d_oct = o1 as i64 - o0 as i64;
        if d_oct == 0 {
            return Err(AlignError::DegenerateInterval(o0, m0, o1, m1));
        }
        let d_mpr = m1 as i64 - m0 as i64;
        gammas.push(d_mpr as f64 / d_oct as f64);
    }
    Ok(RatioVector::new(gammas))
}

/// Extend interior ratios over the head and tail: copy the first and last
/// entries outward, or fall back to the base ratio when no interior
/// interval exists.
pub fn extend_ratios(interior: &RatioVector, gamma_base: f64) -> RatioVector {
    if interior.is_empty() {
        return RatioVector::new(vec![gamma_base, gamma_base]);
    }
    let mut g = Vec::with_capacity(interior.len() + 2);
    g.push(interior.gammas()[0]);
    g.extend_from_slice(interior.gammas());
    g.push(*interior.gammas().last().expect("non-empty"));
    RatioVector::new(g)
}

/// Synthesize the aligned segment's start and end slice from the extended
/// ratios and augment the reference list with them. Out-of-range endpoints
/// are clamped into [0, mpr_len] and logged; a clamp that collapses an
/// interval to zero slice width is unalignable.
pub fn determine_endpoints(
    refs: &ReferencePairs,
    extended: &RatioVector,
    oct_len: usize,
    mpr_len: usize,
) -> Result<AlignmentMap, AlignError> {
    let expected = refs.len() + 1;
    if extended.len() != expected {
        return Err(AlignError::MismatchedRatios {
            got: extended.len(),
            expected,
            pairs: refs.len(),
        });
    }
    let (first_oct, first_mpr) = refs.first();
    let (last_oct, last_mpr) = refs.last();
    if oct_len <= last_oct {
        return Err(AlignError::UnalignableGeometry(format!(
            "pullback length {oct_len} does not extend past the last reference frame {last_oct}"
        )));
    }
    refs.check_bounds(oct_len, mpr_len)?;

    let g = extended.gammas();
    let g_head = g[0];
    let g_tail = g[g.len() - 1];

    let start_raw = first_mpr as i64 - round_half_away(g_head * first_oct as f64);
    let end_raw = last_mpr as i64 + round_half_away(g_tail * (oct_len - last_oct) as f64);

    let mut clamp_log = Vec::new();
    let p_start = if start_raw < 0 {
        clamp_log.push(ClampEvent {
            end: ClampedEnd::Start,
            requested: start_raw,
            clamped_to: 0,
        });
        0
    } else {
        start_raw as usize
    };
    let p_end = if end_raw > mpr_len as i64 {
        clamp_log.push(ClampEvent {
            end: ClampedEnd::End,
            requested: end_raw,
            clamped_to: mpr_len,
        });
        mpr_len
    } else {
        end_raw as usize
    };

    // A clamp that squeezes the head or tail interval to nothing means the
    // geometry cannot carry those frames.
    if start_raw < 0 && first_oct > 0 && p_start == first_mpr {
        return Err(AlignError::UnalignableGeometry(format!(
            "head interval collapsed by clamping (requested start {start_raw})"
        )));
    }
    if end_raw > mpr_len as i64 && p_end == last_mpr {
        return Err(AlignError::UnalignableGeometry(format!(
            "tail interval collapsed by clamping (requested end {end_raw})"
        )));
    }

    let mut augmented = Vec::with_capacity(refs.len() + 2);
    // A first reference already at frame 0 is its own start point.
    if first_oct == 0 {
        augmented.extend_from_slice(refs.pairs());
        augmented[0] = (0, first_mpr);
    } else {
        augmented.push((0, p_start));
        augmented.extend_from_slice(refs.pairs());
    }
    augmented.push((oct_len, p_end));

    let gammas = if first_oct == 0 {
        // The head interval vanished with its synthetic pair.
        RatioVector::new(g[1..].to_vec())
    } else {
        extended.clone()
    };

    let map = AlignmentMap {
        augmented_pairs: augmented,
        gammas,
        clamp_log,
        oct_len,
        mpr_len,
    };
    map.validate()?;
    Ok(map)
}

/// Convenience composition: base ratio → interval ratios → extension →
/// endpoint synthesis.
pub fn build_alignment(
    refs: &ReferencePairs,
    oct_len: usize,
    mpr_len: usize,
    oct_thickness_mm: f64,
    mpr_thickness_mm: f64,
) -> Result<AlignmentMap, AlignError> {
    let gamma_base = base_ratio(oct_thickness_mm, mpr_thickness_mm)?;
    let interior = interval_ratios(refs)?;
    let extended = extend_ratios(&interior, gamma_base);
    determine_endpoints(refs, &extended, oct_len, mpr_len)
}

/// Merge a frame-label segment of length k onto m slices: slice t covers
/// frames [⌊t·k/m⌋, ⌊(t+1)·k/m⌋) (at least the frame at ⌊t·k/m⌋), and the
/// slice label is the majority class, ties broken by severity. A target of
/// 0 yields an empty vector.
pub fn merge_labels(segment: &[u8], target_len: usize) -> Result<Vec<u8>, AlignError> {
    if segment.is_empty() {
        return Err(AlignError::EmptySegment);
    }
    let k = segment.len();
    let mut out = Vec::with_capacity(target_len);
    for t in 0..target_len {
        let lo = t * k / target_len;
        let hi = ((t + 1) * k / target_len).max(lo + 1).min(k);
        out.push(majority_with_severity(&segment[lo..hi]));
    }
    Ok(out)
}

/// Majority class of a non-empty window, ties broken by
/// [`OctClass::severity_rank`].
pub fn majority_with_severity(window: &[u8]) -> u8 {
    debug_assert!(!window.is_empty());
    let mut counts = [0usize; OctClass::COUNT];
    for &l in window {
        counts[l as usize] += 1;
    }
    let mut best = 0u8;
    let mut best_key = (0usize, 0u8);
    for (id, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let rank = OctClass::from_id(id as u8)
            .expect("window ids validated upstream")
            .severity_rank();
        if (count, rank) > best_key {
            best_key = (count, rank);
            best = id as u8;
        }
    }
    best
}

/// The aligned label strip plus its offset within the MPR volume.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedLabels {
    /// First MPR slice the strip covers (the segment's synthesized start).
    pub offset: usize,
    /// One label per MPR slice in [offset, offset + labels.len()).
    pub labels: LabelSeq,
}

/// Transfer a full pullback label sequence through an alignment map,
/// producing one label per MPR slice in the aligned segment.
pub fn align_labels(
    y_oct: &LabelSeq,
    map: &AlignmentMap,
    mpr_thickness_mm: f64,
) -> Result<AlignedLabels, AlignError> {
    if y_oct.taxonomy() != Taxonomy::Oct6 {
        return Err(AlignError::WrongTaxonomy);
    }
    if y_oct.len() != map.oct_len {
        return Err(AlignError::LengthMismatch {
            got: y_oct.len(),
            expected: map.oct_len,
        });
    }
    map.validate()?;
    let labels = y_oct.labels();
    let mut out = Vec::with_capacity(map.segment_end() - map.segment_start());
    for w in map.augmented_pairs.windows(2) {
        let ((o0, m0), (o1, m1)) = (w[0], w[1]);
        let width = m1 - m0;
        if width == 0 {
            continue;
        }
        out.extend(merge_labels(&labels[o0..o1], width)?);
    }
    debug_assert_eq!(out.len(), map.segment_end() - map.segment_start());
    let labels = LabelSeq::new(Taxonomy::Oct6, out, mpr_thickness_mm)
        .map_err(AlignError::References)?;
    Ok(AlignedLabels {
        offset: map.segment_start(),
        labels,
    })
}
