//! Model-ready sequences: windowing aligned MPR volumes, the coarse class
//! mapping, cross-validation folds, and the sequence-archive format.

use crate::align::majority_with_severity;
use crate::volio::{io_err, CctaClass, LabelSeq, OctClass, Taxonomy, VolIoError, Volume3D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("empty input: no slices to window")]
    EmptyInput,
    #[error("cross-section {ny}×{nx} too narrow for window size {d}")]
    TooNarrow { ny: usize, nx: usize, d: usize },
    #[error("label count {labels} does not match slice count {slices}")]
    LengthMismatch { labels: usize, slices: usize },
    #[error("window shape must be positive, got n={n}, d={d}")]
    BadWindowShape { n: usize, d: usize },
    #[error("need at least {k} patients for {k} folds, got {got}")]
    InsufficientPatients { k: usize, got: usize },
    #[error("fold count must be at least 2, got {0}")]
    BadFoldCount(usize),
    #[error("wrong taxonomy: expected {expected:?}")]
    WrongTaxonomy { expected: Taxonomy },
    #[error("archive error at {path}: {reason}")]
    Archive { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] VolIoError),
}

/// One patient's model-ready sequence: L windows of n×d×d voxels with one
/// label per window.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSeq {
    pub patient_id: String,
    /// L windows, each exactly n·d·d values.
    pub volumes: Vec<Vec<f32>>,
    /// L window labels (fine taxonomy).
    pub labels: Vec<u8>,
    pub window_slices: usize,
    pub window_size: usize,
}

impl SampleSeq {
    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }
}

/// Extract the slice range [start, end) of a volume (the aligned segment
/// of an MPR, typically).
pub fn crop_slices(vol: &Volume3D, start: usize, end: usize) -> Result<Volume3D, DatasetError> {
    let [nz, ny, nx] = vol.dims();
    if start >= end || end > nz {
        return Err(DatasetError::LengthMismatch {
            labels: end.saturating_sub(start),
            slices: nz,
        });
    }
    let plane = ny * nx;
    let data = vol.data()[start * plane..end * plane].to_vec();
    Volume3D::new([end - start, ny, nx], vol.spacing_mm(), vol.origin_mm(), data)
        .map_err(DatasetError::Io)
}

/// Min-max normalize a volume's intensities to [0, 1]. A constant volume
/// maps to all zeros.
pub fn normalize_min_max(vol: &Volume3D) -> Volume3D {
    let data = vol.data();
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    let normalized: Vec<f32> = if range > 0.0 {
        data.iter().map(|&v| (v - lo) / range).collect()
    } else {
        vec![0.0; data.len()]
    };
    Volume3D::new(vol.dims(), vol.spacing_mm(), vol.origin_mm(), normalized)
        .expect("shape unchanged")
}

/// Cut an MPR volume with per-slice labels into non-overlapping n-slice
/// windows, center-cropped to d×d. The final partial window is padded by
/// replicating its last real slice; window labels are the majority class
/// of the window's real slices with the severity tie-break.
pub fn split_sequence(
    mpr: &Volume3D,
    labels: &LabelSeq,
    patient_id: &str,
    n: usize,
    d: usize,
) -> Result<SampleSeq, DatasetError> {
    if n == 0 || d == 0 {
        return Err(DatasetError::BadWindowShape { n, d });
    }
    if labels.taxonomy() != Taxonomy::Oct6 {
        return Err(DatasetError::WrongTaxonomy {
            expected: Taxonomy::Oct6,
        });
    }
    let [nz, ny, nx] = mpr.dims();
    if nz == 0 {
        return Err(DatasetError::EmptyInput);
    }
    if ny < d || nx < d {
        return Err(DatasetError::TooNarrow { ny, nx, d });
    }
    if labels.len() != nz {
        return Err(DatasetError::LengthMismatch {
            labels: labels.len(),
            slices: nz,
        });
    }
    let y0 = (ny - d) / 2;
    let x0 = (nx - d) / 2;
    let crop_slice = |z: usize, out: &mut Vec<f32>| {
        for y in y0..y0 + d {
            for x in x0..x0 + d {
                out.push(mpr.get(z, y, x));
            }
        }
    };

    let windows = nz.div_ceil(n);
    let mut volumes = Vec::with_capacity(windows);
    let mut window_labels = Vec::with_capacity(windows);
    for w in 0..windows {
        let lo = w * n;
        let hi = ((w + 1) * n).min(nz);
        let mut vox = Vec::with_capacity(n * d * d);
        for z in lo..hi {
            crop_slice(z, &mut vox);
        }
        for _ in hi..lo + n {
            crop_slice(hi - 1, &mut vox);
        }
        volumes.push(vox);
        window_labels.push(majority_with_severity(&labels.labels()[lo..hi]));
    }
    Ok(SampleSeq {
        patient_id: patient_id.to_string(),
        volumes,
        labels: window_labels,
        window_slices: n,
        window_size: d,
    })
}

/// Map a fine 6-class sequence onto the coarse 3-class taxonomy. Coarse
/// input passes through unchanged, making repeated application idempotent.
pub fn map_to_ccta3(y: &LabelSeq) -> LabelSeq {
    match y.taxonomy() {
        Taxonomy::Ccta3 => y.clone(),
        Taxonomy::Oct6 => {
            let mapped: Vec<u8> = y
                .labels()
                .iter()
                .map(|&l| {
                    match OctClass::from_id(l).expect("ids validated at construction") {
                        OctClass::Calcified => CctaClass::Calcified,
                        OctClass::Stent => CctaClass::Stent,
                        OctClass::Healthy
                        | OctClass::LipidRich
                        | OctClass::Fibrous
                        | OctClass::Thrombus => CctaClass::NonCalcified,
                    }
                    .id()
                })
                .collect();
            LabelSeq::new(Taxonomy::Ccta3, mapped, y.slice_thickness_mm())
                .expect("same length and thickness")
        }
    }
}

/// Patient-level cross-validation assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.assignment.get(patient_id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Patient ids in (train, test) order for a held-out fold.
    pub fn split(&self, held_out: usize) -> (Vec<String>, Vec<String>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (id, &f) in &self.assignment {
            if f == held_out {
                test.push(id.clone());
            } else {
                train.push(id.clone());
            }
        }
        (train, test)
    }
}

/// Seeded shuffle then round-robin assignment; patient-level, never
/// sequence-level.
pub fn make_folds(patient_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan, DatasetError> {
    if k < 2 {
        return Err(DatasetError::BadFoldCount(k));
    }
    if patient_ids.len() < k {
        return Err(DatasetError::InsufficientPatients {
            k,
            got: patient_ids.len(),
        });
    }
    let mut ids: Vec<String> = patient_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < k {
        return Err(DatasetError::InsufficientPatients { k, got: ids.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignment = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i % k))
        .collect();
    Ok(FoldPlan { k, assignment })
}

/// Sequence-archive manifest: window shape, fold plan, and per-patient
/// window labels. Window voxels live in per-patient raw blobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub folds: FoldPlan,
    pub patients: Vec<ArchivePatient>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchivePatient {
    pub id: String,
    pub seq_len: usize,
    pub labels: Vec<u8>,
    pub windows_file: String,
}

/// Write sequences + fold plan as a directory archive.
pub fn write_archive(
    dir: &Path,
    sequences: &[SampleSeq],
    folds: &FoldPlan,
    seed: u64,
) -> Result<(), DatasetError> {
    if sequences.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let n = sequences[0].window_slices;
    let d = sequences[0].window_size;
    let mut patients = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let windows_file = format!("{}.raw", seq.patient_id);
        let path = dir.join(&windows_file);
        let mut bytes = Vec::with_capacity(seq.len() * n * d * d * 4);
        for w in &seq.volumes {
            for v in w {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        patients.push(ArchivePatient {
            id: seq.patient_id.clone(),
            seq_len: seq.len(),
            labels: seq.labels.clone(),
            windows_file,
        });
    }
    let manifest = ArchiveManifest {
        n,
        d,
        seed,
        folds: folds.clone(),
        patients,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(())
}

/// Read a directory archive back into sequences + manifest.
pub fn read_archive(dir: &Path) -> Result<(Vec<SampleSeq>, ArchiveManifest), DatasetError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: ArchiveManifest =
        serde_json::from_str(&text).map_err(|e| DatasetError::Archive {
            path: manifest_path.display().to_string(),
            reason: e.to_string(),
        })?;
    let window_len = manifest.n * manifest.d * manifest.d;
    let mut sequences = Vec::with_capacity(manifest.patients.len());
    for p in &manifest.patients {
        let path = dir.join(&p.windows_file);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        let expected = p.seq_len * window_len * 4;
        if bytes.len() != expected {
            return Err(DatasetError::Archive {
                path: path.display().to_string(),
                reason: format!("{} bytes, expected {expected}", bytes.len()),
            });
        }
        let mut values = Vec::with_capacity(p.seq_len * window_len);
        for chunk in bytes.chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let volumes: Vec<Vec<f32>> = values
            .chunks_exact(window_len)
            .map(|c| c.to_vec())
            .collect();
        if p.labels.len() != p.seq_len {
            return Err(DatasetError::Archive {
                path: path.display().to_string(),
                reason: format!(
                    "{} labels for {} windows",
                    p.labels.len(),
                    p.seq_len
                ),
            });
        }
        sequences.push(SampleSeq {
            patient_id: p.id.clone(),
            volumes,
            labels: p.labels.clone(),
            window_slices: manifest.n,
            window_size: manifest.d,
        });
    }
    Ok((sequences, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_volume(nz: usize, ny: usize, nx: usize) -> Volume3D {
        let data: Vec<f32> = (0..nz * ny * nx).map(|i| i as f32).collect();
        Volume3D::new([nz, ny, nx], [0.5, 0.3, 0.3], [0.0; 3], data).unwrap()
    }

    fn oct_labels(labels: Vec<u8>) -> LabelSeq {
        LabelSeq::new(Taxonomy::Oct6, labels, 0.5).unwrap()
    }

    #[test]
    fn crop_slices_extracts_segment() {
        let vol = ramp_volume(10, 3, 3);
        let cropped = crop_slices(&vol, 2, 7).unwrap();
        assert_eq!(cropped.dims(), [5, 3, 3]);
        assert_eq!(cropped.get(0, 0, 0), vol.get(2, 0, 0));
        assert_eq!(cropped.get(4, 2, 2), vol.get(6, 2, 2));
        assert!(crop_slices(&vol, 7, 7).is_err());
        assert!(crop_slices(&vol, 0, 11).is_err());
    }

    #[test]
    fn window_count_from_slice_count() {
        let vol = ramp_volume(36, 21, 21);
        let y = oct_labels(vec![0; 36]);
        let seq = split_sequence(&vol, &y, "p0", 12, 21).unwrap();
        assert_eq!(seq.len(), 3);
        assert!(seq.volumes.iter().all(|w| w.len() == 12 * 21 * 21));
    }

    #[test]
    fn partial_window_pads_by_replication() {
        let vol = ramp_volume(30, 21, 21);
        let y = oct_labels(vec![0; 30]);
        let seq = split_sequence(&vol, &y, "p0", 12, 21).unwrap();
        assert_eq!(seq.len(), 3);
        let last = &seq.volumes[2];
        let dlen = 21 * 21;
        // Real slices 24..29, then slice 29 replicated 6 times.
        let slice29 = &last[5 * dlen..6 * dlen];
        for pad in 6..12 {
            assert_eq!(&last[pad * dlen..(pad + 1) * dlen], slice29);
        }
    }

    #[test]
    fn tie_window_label_resolved_by_severity() {
        let healthy = OctClass::Healthy.id();
        let calcified = OctClass::Calcified.id();
        let mut labels = vec![healthy; 6];
        labels.extend(vec![calcified; 6]);
        let vol = ramp_volume(12, 21, 21);
        let seq = split_sequence(&vol, &oct_labels(labels), "p0", 12, 21).unwrap();
        assert_eq!(seq.labels, vec![calcified]);
    }

    #[test]
    fn too_narrow_cross_section_rejected() {
        let vol = ramp_volume(12, 15, 15);
        let y = oct_labels(vec![0; 12]);
        assert!(matches!(
            split_sequence(&vol, &y, "p0", 12, 21),
            Err(DatasetError::TooNarrow { .. })
        ));
    }

    #[test]
    fn window_decomposition_reproduces_input() {
        let vol = ramp_volume(29, 9, 9);
        let y = oct_labels((0..29).map(|i| (i % 6) as u8).collect());
        let seq = split_sequence(&vol, &y, "p0", 12, 9).unwrap();
        let dlen = 81;
        let mut rebuilt: Vec<f32> = Vec::new();
        for (w, win) in seq.volumes.iter().enumerate() {
            let real = (29 - w * 12).min(12);
            rebuilt.extend_from_slice(&win[..real * dlen]);
        }
        assert_eq!(rebuilt, vol.data());
    }

    #[test]
    fn coarse_mapping_matches_correspondence_table() {
        let y = oct_labels(vec![
            OctClass::Healthy.id(),
            OctClass::LipidRich.id(),
            OctClass::Thrombus.id(),
            OctClass::Fibrous.id(),
            OctClass::Calcified.id(),
            OctClass::Stent.id(),
        ]);
        let c = map_to_ccta3(&y);
        assert_eq!(c.taxonomy(), Taxonomy::Ccta3);
        assert_eq!(
            c.labels(),
            &[
                CctaClass::NonCalcified.id(),
                CctaClass::NonCalcified.id(),
                CctaClass::NonCalcified.id(),
                CctaClass::NonCalcified.id(),
                CctaClass::Calcified.id(),
                CctaClass::Stent.id(),
            ]
        );
        // Idempotent through the coarse identity.
        assert_eq!(map_to_ccta3(&c), c);
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:03}")).collect()
    }

    #[test]
    fn fold_sizes_balanced() {
        let plan = make_folds(&ids(55), 5, 7).unwrap();
        assert_eq!(plan.fold_sizes(), vec![11; 5]);
        let plan = make_folds(&ids(7), 5, 7).unwrap();
        let mut sizes = plan.fold_sizes();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
    }

    #[test]
    fn folds_deterministic_given_seed() {
        let a = make_folds(&ids(20), 5, 42).unwrap();
        let b = make_folds(&ids(20), 5, 42).unwrap();
        assert_eq!(a, b);
        let c = make_folds(&ids(20), 5, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_patients_rejected() {
        assert!(matches!(
            make_folds(&ids(3), 5, 0),
            Err(DatasetError::InsufficientPatients { .. })
        ));
    }

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vol = ramp_volume(24, 9, 9);
        let y = oct_labels((0..24).map(|i| (i % 6) as u8).collect());
        let s0 = split_sequence(&vol, &y, "p000", 12, 9).unwrap();
        let s1 = split_sequence(&vol, &y, "p001", 12, 9).unwrap();
        let folds = make_folds(&ids(2), 2, 1).unwrap();
        write_archive(dir.path(), &[s0.clone(), s1.clone()], &folds, 1).unwrap();
        let (seqs, manifest) = read_archive(dir.path()).unwrap();
        assert_eq!(seqs, vec![s0, s1]);
        assert_eq!(manifest.folds, folds);
        assert_eq!((manifest.n, manifest.d), (12, 9));
    }

    proptest! {
        /// Leakage check: every patient lands in exactly one fold.
        #[test]
        fn folds_partition_patients(n in 5usize..40, k in 2usize..6, seed: u64) {
            prop_assume!(n >= k);
            let plan = make_folds(&ids(n), k, seed).unwrap();
            prop_assert_eq!(plan.assignment.len(), n);
            for fold in 0..k {
                let (train, test) = plan.split(fold);
                prop_assert_eq!(train.len() + test.len(), n);
                for id in &test {
                    prop_assert!(!train.contains(id));
                }
                prop_assert!(!test.is_empty());
            }
        }
    }
}
