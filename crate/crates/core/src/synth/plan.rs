//! Exact interval planning: snap a phantom description to the MPR slice
//! grid and derive integer frame counts whose realized ratios the
//! alignment stage recovers bit-exactly.

use super::{AlignedLabelsSer, GroundTruth, PhantomSpec, SynthError};
use crate::align::{AlignmentMap, RatioVector};
use crate::volio::{LabelSeq, OctClass, ReferencePairs, Taxonomy};

/// The realized integer construction for one phantom.
#[derive(Debug, Clone)]
pub(crate) struct IntervalPlan {
    /// Per pullback interval, in order: head, interiors, tail. A dropped
    /// head/tail simply does not appear.
    pub classes: Vec<u8>,
    pub slice_widths: Vec<usize>,
    pub frame_counts: Vec<usize>,
    /// Realized ratio per interval (slice width / frame count, except a
    /// zero-width tail keeps the base ratio).
    pub gammas: Vec<f64>,
    /// First MPR slice of the aligned segment.
    pub segment_start: usize,
    /// MPR slice count the reconstruction will produce.
    pub mpr_len: usize,
    /// Class partition of the whole vessel in slice indices.
    pub vessel_segments: Vec<(u8, usize, usize)>,
    /// True when the pullback starts exactly at the first reference.
    pub head_dropped: bool,
}

impl IntervalPlan {
    pub fn oct_len(&self) -> usize {
        self.frame_counts.iter().sum()
    }

    pub fn oct_labels(&self, thickness_mm: f64) -> LabelSeq {
        let mut labels = Vec::with_capacity(self.oct_len());
        for (&class, &frames) in self.classes.iter().zip(&self.frame_counts) {
            labels.extend(std::iter::repeat(class).take(frames));
        }
        LabelSeq::new(Taxonomy::Oct6, labels, thickness_mm).expect("plan yields valid labels")
    }

    /// Reference pairs at the interval boundaries interior to the pullback.
    pub fn references(&self) -> ReferencePairs {
        let mut pairs = Vec::new();
        // With the head dropped, the pullback begins exactly at the first
        // reference boundary.
        if self.head_dropped {
            pairs.push((0, self.segment_start));
        }
        let mut oct = 0usize;
        let mut mpr = self.segment_start;
        let last = self.slice_widths.len() - 1;
        for i in 0..self.slice_widths.len() {
            oct += self.frame_counts[i];
            mpr += self.slice_widths[i];
            if i < last {
                pairs.push((oct, mpr));
            }
        }
        ReferencePairs::new(pairs).expect("plan yields monotone references")
    }

    /// The true alignment map (augmented pairs with realized ratios).
    pub fn alignment_map(&self) -> AlignmentMap {
        let mut pairs = Vec::with_capacity(self.slice_widths.len() + 1);
        let mut oct = 0usize;
        let mut mpr = self.segment_start;
        pairs.push((oct, mpr));
        for i in 0..self.slice_widths.len() {
            oct += self.frame_counts[i];
            mpr += self.slice_widths[i];
            pairs.push((oct, mpr));
        }
        AlignmentMap {
            augmented_pairs: pairs,
            gammas: RatioVector::new(self.gammas.clone()),
            clamp_log: Vec::new(),
            oct_len: oct,
            mpr_len: self.mpr_len,
        }
    }

    /// The true MPR label strip: each interval contributes its class over
    /// its slice width.
    pub fn truth_strip(&self, mpr_thickness_mm: f64) -> AlignedLabelsSer {
        let mut labels = Vec::new();
        for (&class, &width) in self.classes.iter().zip(&self.slice_widths) {
            labels.extend(std::iter::repeat(class).take(width));
        }
        AlignedLabelsSer {
            offset: self.segment_start,
            labels: LabelSeq::new(Taxonomy::Oct6, labels, mpr_thickness_mm)
                .expect("plan yields a non-empty strip"),
        }
    }

    pub fn ground_truth(&self, mpr_thickness_mm: f64) -> GroundTruth {
        GroundTruth {
            alignment: self.alignment_map(),
            mpr_labels: self.truth_strip(mpr_thickness_mm),
            vessel_segments: self.vessel_segments.clone(),
        }
    }

    /// Class at an MPR slice index, over the whole vessel.
    pub fn class_at_slice(&self, slice: usize) -> u8 {
        for &(class, lo, hi) in &self.vessel_segments {
            if slice >= lo && slice < hi {
                return class;
            }
        }
        OctClass::Healthy.id()
    }
}

/// MPR slice count the reconstruction produces for a given usable arc
/// length (mirrors the resampler's endpoint rule).
pub(crate) fn mpr_slice_count(total_arc_mm: f64, thickness_mm: f64) -> usize {
    let count = (total_arc_mm / thickness_mm + 1e-9).floor() as usize;
    let leftover = total_arc_mm - count as f64 * thickness_mm;
    count + 1 + usize::from(leftover > thickness_mm / 2.0)
}

/// Snap a phantom description to the slice grid and derive frame counts.
///
/// `usable_arc_mm` is the arc length of the centerline the volume pipeline
/// will actually see (the polyline arc); for label-only cases pass the
/// nominal vessel length.
pub(crate) fn plan_intervals(
    spec: &PhantomSpec,
    usable_arc_mm: f64,
) -> Result<IntervalPlan, SynthError> {
    spec.validate()?;
    let t = spec.mpr_thickness_mm;
    let mpr_len = mpr_slice_count(usable_arc_mm, t);
    // Slices on the uniform grid (the appended endpoint slice, if any, sits
    // past the grid and never joins the pullback).
    let grid_slices = ((usable_arc_mm / t + 1e-9).floor() as usize) + 1;
    let last_slice = grid_slices - 1;

    let snap = |mm: f64| -> usize { ((mm / t).round() as usize).min(last_slice) };

    // Vessel partition in slice indices: runs plus healthy gaps.
    let mut segments: Vec<(u8, usize, usize)> = Vec::new();
    let mut cursor = 0usize;
    for run in &spec.runs {
        let lo = snap(run.start_mm);
        let hi = snap(run.end_mm);
        if hi <= lo {
            continue; // run vanished in snapping
        }
        if lo > cursor {
            segments.push((OctClass::Healthy.id(), cursor, lo));
        }
        if lo < cursor {
            return Err(SynthError::InvalidSpec(format!(
                "runs overlap after snapping near slice {lo}"
            )));
        }
        segments.push((run.class.id(), lo, hi));
        cursor = hi;
    }
    if cursor < last_slice {
        segments.push((OctClass::Healthy.id(), cursor, last_slice));
    }
    if segments.is_empty() {
        segments.push((OctClass::Healthy.id(), 0, last_slice));
    }

    let pb_start = snap(spec.pullback_mm.0);
    let pb_end = snap(spec.pullback_mm.1);
    if pb_end <= pb_start + 1 {
        return Err(SynthError::InvalidSpec(
            "pullback too short after snapping".to_string(),
        ));
    }

    // References: segment boundaries strictly inside the pullback. A
    // pullback with no class boundary still gets one landmark anchor (a
    // bifurcation-style reference) at its midpoint.
    let mut boundaries: Vec<usize> = segments
        .iter()
        .map(|&(_, lo, _)| lo)
        .filter(|&b| b > pb_start && b < pb_end)
        .collect();
    if boundaries.is_empty() {
        boundaries.push((pb_start + pb_end) / 2);
    }

    let class_of = |slice: usize| -> u8 {
        segments
            .iter()
            .find(|&&(_, lo, hi)| slice >= lo && slice < hi)
            .map(|&(c, _, _)| c)
            .unwrap_or(OctClass::Healthy.id())
    };
    let segment_containing = |slice: usize| -> (usize, usize) {
        segments
            .iter()
            .find(|&&(_, lo, hi)| slice >= lo && slice < hi)
            .map(|&(_, lo, hi)| (lo, hi))
            .unwrap_or((0, last_slice))
    };

    // Interval skeleton: head, interiors, tail.
    let mut edges = Vec::with_capacity(boundaries.len() + 2);
    edges.push(pb_start);
    edges.extend_from_slice(&boundaries);
    edges.push(pb_end);
    let m = edges.len() - 1;

    let gamma_base = spec.oct_thickness_mm / spec.mpr_thickness_mm;
    let requested = |j: usize| -> f64 {
        if spec.stretches.is_empty() {
            gamma_base
        } else {
            spec.stretches[j % spec.stretches.len()]
        }
    };

    // Interior intervals: widths are fixed by the boundaries, frame counts
    // round the requested ratio, realized γ = width/frames exactly.
    let mut interior_frames = Vec::with_capacity(m.saturating_sub(2));
    for j in 1..m.saturating_sub(1) {
        let w = edges[j + 1] - edges[j];
        let f = ((w as f64 / requested(j - 1)).round() as usize).max(1);
        interior_frames.push(f);
    }
    // The head and tail reuse the ratio the alignment stage will assume:
    // the neighboring interior's realized γ, or the base ratio with a
    // single reference. Their widths are defined as round(γ·frames), which
    // is exactly the endpoint the alignment synthesizes.
    let (head_gamma, tail_gamma) = if m == 2 {
        (gamma_base, gamma_base)
    } else {
        let first = (edges[2] - edges[1]) as f64 / interior_frames[0] as f64;
        let last_w = edges[m - 1] - edges[m - 2];
        let last = last_w as f64 / *interior_frames.last().expect("non-empty") as f64;
        (first, last)
    };

    let mut classes = Vec::with_capacity(m);
    let mut widths = Vec::with_capacity(m);
    let mut frames = Vec::with_capacity(m);
    let mut gammas = Vec::with_capacity(m);
    let mut head_dropped = false;

    // Head: stay within the class segment that ends at the first boundary.
    let head_room = edges[1] - segment_containing(edges[1] - 1).0;
    let mut head_frames = ((edges[1] - edges[0]) as f64 / head_gamma).round() as usize;
    head_frames = head_frames.max(1);
    let mut head_width = (head_gamma * head_frames as f64).round() as usize;
    while head_width > head_room && head_frames > 1 {
        head_frames -= 1;
        head_width = (head_gamma * head_frames as f64).round() as usize;
    }
    let segment_start = if head_width > head_room {
        head_dropped = true;
        edges[1]
    } else {
        classes.push(class_of(edges[1] - 1));
        widths.push(head_width);
        frames.push(head_frames);
        gammas.push(head_gamma);
        edges[1] - head_width
    };

    for j in 1..m.saturating_sub(1) {
        let w = edges[j + 1] - edges[j];
        classes.push(class_of(edges[j]));
        widths.push(w);
        frames.push(interior_frames[j - 1]);
        gammas.push(w as f64 / interior_frames[j - 1] as f64);
    }

    // Tail: at least one frame past the last reference, inside the class
    // segment that starts there.
    let tail_room = segment_containing(edges[m - 1]).1.min(last_slice) - edges[m - 1];
    let mut tail_frames = ((edges[m] - edges[m - 1]) as f64 / tail_gamma).round() as usize;
    tail_frames = tail_frames.max(1);
    let mut tail_width = (tail_gamma * tail_frames as f64).round() as usize;
    while tail_width > tail_room && tail_frames > 1 {
        tail_frames -= 1;
        tail_width = (tail_gamma * tail_frames as f64).round() as usize;
    }
    if tail_width > tail_room {
        return Err(SynthError::InvalidSpec(format!(
            "tail ratio {tail_gamma} cannot fit {tail_room} slices past the last reference"
        )));
    }
    classes.push(class_of(edges[m - 1]));
    widths.push(tail_width);
    frames.push(tail_frames);
    gammas.push(tail_gamma);

    if widths.iter().sum::<usize>() == 0 {
        return Err(SynthError::Internal("empty pullback plan".to_string()));
    }

    Ok(IntervalPlan {
        classes,
        slice_widths: widths,
        frame_counts: frames,
        gammas,
        segment_start,
        mpr_len,
        vessel_segments: segments,
        head_dropped,
    })
}

/// A labels-only phantom: everything the alignment stage consumes plus
/// the ground truth, with no volume rendering.
#[derive(Debug, Clone)]
pub struct AlignmentCase {
    pub oct_labels: LabelSeq,
    pub references: ReferencePairs,
    pub oct_len: usize,
    pub mpr_len: usize,
    pub truth: GroundTruth,
}

/// Fast path for alignment verification: derive labels, references, and
/// ground truth without rendering any volume.
pub fn gen_alignment_case(spec: &PhantomSpec) -> Result<AlignmentCase, SynthError> {
    let plan = plan_intervals(spec, spec.vessel_length_mm)?;
    Ok(AlignmentCase {
        oct_labels: plan.oct_labels(spec.oct_thickness_mm),
        references: plan.references(),
        oct_len: plan.oct_len(),
        mpr_len: plan.mpr_len,
        truth: plan.ground_truth(spec.mpr_thickness_mm),
    })
}
