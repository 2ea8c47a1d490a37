//! Small end-to-end flow across the public API: phantom → straightened
//! volume → label transfer → windowed sequences → a short training run.

use plaquemap_core::align::{align_labels, build_alignment};
use plaquemap_core::dataset::{
    crop_slices, make_folds, normalize_min_max, read_archive, split_sequence, write_archive,
    SampleSeq,
};
use plaquemap_core::model::{
    load_checkpoint, save_checkpoint, train_fold, ModelConfig, TrainConfig,
};
use plaquemap_core::mprrec::{reconstruct_mpr, MprConfig};
use plaquemap_core::synth::{gen_phantom, patient_specs, DatasetMode, GeneratorConfig};

fn build_sequences(gen: &GeneratorConfig, n: usize, d: usize) -> Vec<SampleSeq> {
    let mpr_cfg = MprConfig::default();
    patient_specs(gen)
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let id = format!("p{i:03}");
            let bundle = gen_phantom(spec).expect("phantom");
            let mpr = reconstruct_mpr(&bundle.ccta, &bundle.centerline, &mpr_cfg).expect("mpr");
            let map = build_alignment(
                &bundle.references,
                bundle.oct_labels.len(),
                mpr.dims()[0],
                bundle.oct_labels.slice_thickness_mm(),
                mpr.spacing_mm()[0],
            )
            .expect("alignment");
            let aligned =
                align_labels(&bundle.oct_labels, &map, mpr.spacing_mm()[0]).expect("transfer");
            // The transferred strip must be the phantom's ground truth.
            assert_eq!(aligned.offset, bundle.truth.mpr_labels.offset);
            assert_eq!(
                aligned.labels.labels(),
                bundle.truth.mpr_labels.labels.labels()
            );
            let segment =
                crop_slices(&mpr, aligned.offset, aligned.offset + aligned.labels.len())
                    .expect("crop");
            let normalized = normalize_min_max(&segment);
            split_sequence(&normalized, &aligned.labels, &id, n, d).expect("windows")
        })
        .collect()
}

/// Rendered class signatures must be separable from crude per-window
/// intensity statistics alone (a nearest-centroid linear classifier) —
/// the sanity floor under the actual training runs.
#[test]
fn window_classes_separable_by_simple_features() {
    let gen = GeneratorConfig {
        patients: 6,
        seed: 77,
        mode: DatasetMode::Standard,
        ..GeneratorConfig::default()
    };
    let (n, d) = (12usize, 21usize);
    let seqs = build_sequences(&gen, n, d);
    // Ring geometry in pixels: the vessel sits on the central pixel, the
    // wall band roughly 5–9 px out at 0.3 mm spacing. The dark crescent
    // points along +rows (the frame normal direction).
    let mid = (d as f64 - 1.0) / 2.0;
    const NF: usize = 6;
    let feature = |w: &[f32]| -> [f64; NF] {
        let mut core = (0.0, 0usize);
        let mut ring = (0.0, 0usize);
        let mut ring_bright = 0usize;
        let mut ring_pos = (0.0, 0usize);
        let mut ring_neg = (0.0, 0usize);
        let mut slice_max = vec![0.0f64; n];
        for z in 0..n {
            for i in 0..d {
                for j in 0..d {
                    let v = w[(z * d + i) * d + j] as f64;
                    let di = i as f64 - mid;
                    let dj = j as f64 - mid;
                    let rho = (di * di + dj * dj).sqrt();
                    if rho < 3.0 {
                        core.0 += v;
                        core.1 += 1;
                    } else if (4.5..9.0).contains(&rho) {
                        ring.0 += v;
                        ring.1 += 1;
                        if v > 0.6 {
                            ring_bright += 1;
                        }
                        if di > 0.0 {
                            ring_pos.0 += v;
                            ring_pos.1 += 1;
                        } else if di < 0.0 {
                            ring_neg.0 += v;
                            ring_neg.1 += 1;
                        }
                        slice_max[z] = slice_max[z].max(v);
                    }
                }
            }
        }
        let ring_mean = ring.0 / ring.1 as f64;
        let max_mean = slice_max.iter().sum::<f64>() / n as f64;
        let max_var = slice_max
            .iter()
            .map(|&v| (v - max_mean) * (v - max_mean))
            .sum::<f64>()
            / n as f64;
        [
            core.0 / core.1 as f64,
            ring_mean,
            ring_bright as f64 / ring.1 as f64,
            ring_pos.0 / ring_pos.1 as f64 - ring_neg.0 / ring_neg.1 as f64,
            slice_max.iter().cloned().fold(f64::MIN, f64::max),
            max_var.sqrt(),
        ]
    };
    let mut feats: Vec<([f64; NF], u8)> = Vec::new();
    for s in &seqs {
        for (w, &label) in s.volumes.iter().zip(&s.labels) {
            feats.push((feature(w), label));
        }
    }
    // Z-score per feature so centroid distances weigh them evenly.
    for k in 0..NF {
        let mean = feats.iter().map(|(f, _)| f[k]).sum::<f64>() / feats.len() as f64;
        let var = feats
            .iter()
            .map(|(f, _)| (f[k] - mean) * (f[k] - mean))
            .sum::<f64>()
            / feats.len() as f64;
        let std = var.sqrt().max(1e-12);
        for (f, _) in &mut feats {
            f[k] = (f[k] - mean) / std;
        }
    }
    let mut centroids = vec![[0.0f64; NF]; 6];
    let mut counts = vec![0usize; 6];
    for (f, label) in &feats {
        for k in 0..NF {
            centroids[*label as usize][k] += f[k];
        }
        counts[*label as usize] += 1;
    }
    for (c, &cnt) in centroids.iter_mut().zip(&counts) {
        if cnt > 0 {
            for v in c.iter_mut() {
                *v /= cnt as f64;
            }
        }
    }
    let mut hits = 0usize;
    for (f, label) in &feats {
        let nearest = (0..6)
            .filter(|&c| counts[c] > 0)
            .min_by(|&a, &b| {
                let da: f64 = (0..NF).map(|k| (f[k] - centroids[a][k]).powi(2)).sum();
                let db: f64 = (0..NF).map(|k| (f[k] - centroids[b][k]).powi(2)).sum();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        if nearest as u8 == *label {
            hits += 1;
        }
    }
    let acc = hits as f64 / feats.len() as f64;
    assert!(
        acc >= 0.8,
        "nearest-centroid accuracy {acc:.3} below the separability floor"
    );
}

#[test]
fn phantom_to_training_flow() {
    let gen = GeneratorConfig {
        patients: 5,
        seed: 31,
        mode: DatasetMode::Standard,
        vessel_length_range: (55.0, 65.0),
        ..GeneratorConfig::default()
    };
    let seqs = build_sequences(&gen, 12, 15);
    assert_eq!(seqs.len(), 5);
    for s in &seqs {
        assert!(!s.is_empty());
        assert!(s.volumes.iter().all(|w| w.len() == 12 * 15 * 15));
        // Normalized intensities live in [0, 1].
        assert!(s
            .volumes
            .iter()
            .flatten()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    // Archive round trip.
    let dir = tempfile::tempdir().unwrap();
    let ids: Vec<String> = seqs.iter().map(|s| s.patient_id.clone()).collect();
    let folds = make_folds(&ids, 2, 9).unwrap();
    write_archive(dir.path(), &seqs, &folds, 9).unwrap();
    let (back, manifest) = read_archive(dir.path()).unwrap();
    assert_eq!(back, seqs);
    assert_eq!(manifest.folds, folds);

    // A short training run learns something and checkpoints round-trip.
    let mc = ModelConfig {
        window_slices: 12,
        window_size: 15,
        d_model: 16,
        heads: 2,
        encoder_layers: 1,
        cnn_channels: vec![4, 8],
        dropout: 0.0,
        seed: 5,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs: 10,
        batch_sequences: 4,
        seed: 6,
        ..TrainConfig::default()
    };
    let (train, test): (Vec<SampleSeq>, Vec<SampleSeq>) = {
        let mut tr = Vec::new();
        let mut te = Vec::new();
        for s in seqs {
            if folds.fold_of(&s.patient_id) == Some(0) {
                te.push(s);
            } else {
                tr.push(s);
            }
        }
        (tr, te)
    };
    let (model, report) = train_fold(&train, &test, &mc, &tc).unwrap();
    let first = report.history.first().unwrap().train_loss;
    let last = report.history.last().unwrap().train_loss;
    assert!(last < first, "training loss did not decrease: {first} → {last}");

    let ckpt = tempfile::tempdir().unwrap();
    save_checkpoint(&model, ckpt.path()).unwrap();
    let loaded = load_checkpoint(ckpt.path()).unwrap();
    let before = model.predict(&test).unwrap();
    let after = loaded.predict(&test).unwrap();
    assert_eq!(before, after);
}
