//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its measured numbers (run with `--nocapture` to see
//! them). Heavy timed criteria serialize on a mutex so wall-clock bounds
//! are measured without contention.

use plaquemap_core::align::{
    align_labels, base_ratio, build_alignment, determine_endpoints, extend_ratios,
    interval_ratios, RatioVector,
};
use plaquemap_core::dataset::{
    crop_slices, make_folds, normalize_min_max, split_sequence, SampleSeq,
};
use plaquemap_core::metrics::{cohen_kappa, roc_auc_ovr, ConfusionMatrix};
use plaquemap_core::model::{train_fold, BatchInput, ModelConfig, SequenceClassifier, TrainConfig};
use plaquemap_core::mprrec::{reconstruct_mpr, MprConfig};
use plaquemap_core::nn::Graph;
use plaquemap_core::synth::{
    gen_alignment_case, gen_phantom, patient_specs, DatasetMode, GeneratorConfig,
};
use plaquemap_core::volio::ReferencePairs;
use rand_like::SmallRng;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy_guard() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

/// Tiny deterministic generator for oracle fuzzing (keeps the test free of
/// extra dependencies).
mod rand_like {
    pub struct SmallRng(u64);

    impl SmallRng {
        pub fn new(seed: u64) -> Self {
            Self(seed.wrapping_add(0x9E37_79B9_7F4A_7C15))
        }

        pub fn next_u64(&mut self) -> u64 {
            let mut z = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
            self.0 = z;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        }

        pub fn below(&mut self, n: u64) -> u64 {
            self.next_u64() % n
        }

        pub fn unit(&mut self) -> f64 {
            (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
        }
    }
}

/// Criterion 1 — alignment exactness on 200 seeded phantoms with
/// piecewise-uniform stretch.
#[test]
fn criterion_1_alignment_exactness() {
    let _g = heavy_guard();
    let start = Instant::now();
    let cfg = GeneratorConfig {
        patients: 200,
        seed: 1001,
        mode: DatasetMode::Standard,
        ..GeneratorConfig::default()
    };
    let specs = patient_specs(&cfg);
    let mut total_slices = 0usize;
    let mut mismatches = 0usize;
    for spec in &specs {
        let case = gen_alignment_case(spec).expect("phantom case");
        let map = build_alignment(
            &case.references,
            case.oct_len,
            case.mpr_len,
            spec.oct_thickness_mm,
            spec.mpr_thickness_mm,
        )
        .expect("alignment");
        let aligned =
            align_labels(&case.oct_labels, &map, spec.mpr_thickness_mm).expect("transfer");

        // Same support.
        assert_eq!(aligned.offset, case.truth.mpr_labels.offset, "seed {}", spec.seed);
        let got = aligned.labels.labels();
        let want = case.truth.mpr_labels.labels.labels();
        assert_eq!(got.len(), want.len(), "seed {}", spec.seed);
        total_slices += want.len();

        // Interval boundaries in strip coordinates for the mismatch rule.
        let boundaries: Vec<i64> = map
            .augmented_pairs
            .iter()
            .map(|&(_, m)| m as i64)
            .collect();
        for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
            if g != w {
                mismatches += 1;
                let slice = (aligned.offset + i) as i64;
                let near = boundaries.iter().any(|&b| (slice - b).abs() <= 1);
                assert!(
                    near,
                    "seed {}: mismatch at slice {slice} not within 1 of a boundary",
                    spec.seed
                );
            }
        }

        // Interior ratio recovery: the estimator's ratios against the
        // generator's own (independently computed) realized ratios.
        let est = interval_ratios(&case.references).expect("ratios");
        let truth_gammas = case.truth.alignment.gammas.gammas();
        let head_present = case.references.first().0 != 0;
        let interior_truth: &[f64] = if head_present {
            &truth_gammas[1..truth_gammas.len() - 1]
        } else {
            &truth_gammas[..truth_gammas.len() - 1]
        };
        assert_eq!(est.gammas().len(), interior_truth.len(), "seed {}", spec.seed);
        for (e, t) in est.gammas().iter().zip(interior_truth) {
            let rel = (e - t).abs() / t.abs().max(1e-300);
            assert!(
                rel <= 1e-12,
                "seed {}: interior ratio {e} vs {t} (rel {rel:.3e})",
                spec.seed
            );
        }
    }
    let agreement = 1.0 - mismatches as f64 / total_slices as f64;
    assert!(
        agreement >= 0.99,
        "per-slice agreement {agreement} below 0.99"
    );
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 10.0,
        "criterion 1 took {elapsed:?} (bound 10 s)"
    );
    println!(
        "[acceptance] criterion 1 (alignment exactness): PASS — 200 phantoms, \
         {total_slices} slices, agreement {agreement:.6}, {mismatches} mismatches, {elapsed:?}"
    );
}

/// Criterion 2 — alignment branch coverage and hand-computed endpoints.
#[test]
fn criterion_2_branch_coverage() {
    // Single reference: the extension falls back to the base ratio.
    let single = plaquemap_core::synth::PhantomSpec {
        seed: 5,
        runs: Vec::new(), // landmark anchor only
        ..plaquemap_core::synth::PhantomSpec::default()
    };
    let case = gen_alignment_case(&single).expect("single-ref case");
    assert_eq!(case.references.len(), 1);
    let interior = interval_ratios(&case.references).expect("ratios");
    assert!(interior.is_empty());
    let gb = base_ratio(single.oct_thickness_mm, single.mpr_thickness_mm).unwrap();
    let extended = extend_ratios(&interior, gb);
    assert_eq!(extended.gammas(), &[gb, gb]);
    let map = build_alignment(
        &case.references,
        case.oct_len,
        case.mpr_len,
        single.oct_thickness_mm,
        single.mpr_thickness_mm,
    )
    .unwrap();
    assert_eq!(map.augmented_pairs, case.truth.alignment.augmented_pairs);

    // Multi-reference: head and tail reuse the neighboring interval ratios.
    let refs = ReferencePairs::new(vec![(10, 30), (20, 60), (40, 70)]).unwrap();
    let interior = interval_ratios(&refs).unwrap();
    assert_eq!(interior.gammas(), &[3.0, 0.5]);
    let extended = extend_ratios(&interior, 0.4);
    assert_eq!(extended.gammas(), &[3.0, 3.0, 0.5, 0.5]);

    // Hand-computed endpoint examples; exact match required.
    let map = determine_endpoints(
        &ReferencePairs::new(vec![(10, 25)]).unwrap(),
        &RatioVector::new(vec![0.4, 0.4]),
        50,
        100,
    )
    .unwrap();
    assert_eq!(map.augmented_pairs, vec![(0, 21), (10, 25), (50, 41)]);

    let map = determine_endpoints(
        &ReferencePairs::new(vec![(10, 2)]).unwrap(),
        &RatioVector::new(vec![1.0, 1.0]),
        20,
        100,
    )
    .unwrap();
    assert_eq!(map.clamp_log.len(), 1);
    assert_eq!(map.augmented_pairs[0], (0, 0));

    assert!(determine_endpoints(
        &ReferencePairs::new(vec![(0, 0)]).unwrap(),
        &RatioVector::new(vec![1.0, 1.0]),
        0,
        100,
    )
    .is_err());

    println!(
        "[acceptance] criterion 2 (branch coverage): PASS — base-ratio fallback, \
         head/tail extension, and endpoint arithmetic all exact"
    );
}

/// Criterion 3 — kappa oracle on the canonical 2×2 counts, with the
/// discrepancy documented in the eval report surface.
#[test]
fn criterion_3_kappa_oracle() {
    let m = ConfusionMatrix::from_counts(
        vec!["positive".into(), "negative".into()],
        vec![121, 190, 140, 128],
    )
    .unwrap();
    let start = Instant::now();
    let kappa = cohen_kappa(&m).unwrap();
    let elapsed = start.elapsed();
    assert!(
        (kappa - (-0.1314)).abs() < 0.0005,
        "kappa {kappa} not within 0.0005 of -0.1314"
    );
    assert!(
        elapsed.as_secs_f64() < 1e-3,
        "kappa took {elapsed:?} (bound 1 ms)"
    );

    // The agreement reports must carry the documented discrepancy note;
    // exercise the shipped surface through the kappa subcommand.
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    std::fs::write(
        &a,
        "# thickness_mm=0.5\n# taxonomy=ccta3\nindex,label\n0,non_calcified\n1,calcified\n2,stent\n3,non_calcified\n",
    )
    .unwrap();
    std::fs::write(
        &b,
        "# thickness_mm=0.5\n# taxonomy=ccta3\nindex,label\n0,non_calcified\n1,calcified\n2,non_calcified\n3,stent\n",
    )
    .unwrap();
    let out = dir.path().join("report");
    let status = Command::new(env!("CARGO_BIN_EXE_plaquemap"))
        .args(["kappa", "--a"])
        .arg(&a)
        .arg("--b")
        .arg(&b)
        .arg("--out")
        .arg(&out)
        .status()
        .expect("kappa subcommand runs");
    assert!(status.success());
    let report = std::fs::read_to_string(out.join("agreement.json")).unwrap();
    assert!(report.contains("-0.1316") && report.contains("0.113"));

    println!(
        "[acceptance] criterion 3 (kappa oracle): PASS — kappa {kappa:.4} \
         (formula) vs -0.1314±0.0005; discrepancy note present; {elapsed:?}"
    );
}

/// Brute-force Mann–Whitney count.
fn mann_whitney(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0u64;
    let mut ties = 0u64;
    let mut pairs = 0u64;
    for (&sp, &lp) in scores.iter().zip(positive) {
        if !lp {
            continue;
        }
        for (&sn, &ln) in scores.iter().zip(positive) {
            if ln {
                continue;
            }
            pairs += 1;
            if sp > sn {
                wins += 1;
            } else if sp == sn {
                ties += 1;
            }
        }
    }
    (2 * wins + ties) as f64 / (2 * pairs) as f64
}

/// Criterion 4 — AUC equals the pairwise oracle exactly on 1000 random
/// instances.
#[test]
fn criterion_4_auc_oracle_equivalence() {
    let _g = heavy_guard();
    let start = Instant::now();
    let mut rng = SmallRng::new(404);
    let mut checked = 0;
    while checked < 1000 {
        let len = 2 + rng.below(199) as usize;
        // Quantized scores produce plenty of exact ties.
        let levels = 1 + rng.below(32);
        let scores: Vec<f64> = (0..len)
            .map(|_| (rng.below(levels) as f64) / levels as f64)
            .collect();
        let positive: Vec<bool> = (0..len).map(|_| rng.unit() < 0.4).collect();
        let pos = positive.iter().filter(|&&p| p).count();
        if pos == 0 || pos == len {
            continue;
        }
        let table: Vec<Vec<f64>> = scores.iter().map(|&s| vec![1.0 - s, s]).collect();
        let truth: Vec<u8> = positive.iter().map(|&p| p as u8).collect();
        let fast = roc_auc_ovr(&table, &truth, 1).expect("auc");
        let slow = mann_whitney(&scores, &positive);
        assert!(
            fast == slow,
            "instance {checked}: fast {fast} != oracle {slow}"
        );
        checked += 1;
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 5.0,
        "criterion 4 took {elapsed:?} (bound 5 s)"
    );
    println!(
        "[acceptance] criterion 4 (AUC oracle equivalence): PASS — 1000 instances \
         bit-exact, {elapsed:?}"
    );
}

fn toy_sequences() -> Vec<SampleSeq> {
    let window_len = 4 * 5 * 5;
    vec![SampleSeq {
        patient_id: "toy".into(),
        volumes: (0..3)
            .map(|w| {
                (0..window_len)
                    .map(|i| (((i * 37 + w * 101) % 53) as f32 - 26.0) / 40.0)
                    .collect()
            })
            .collect(),
        labels: vec![1, 4, 2],
        window_slices: 4,
        window_size: 5,
    }]
}

/// Criterion 5 — composed-model gradient vs central finite differences.
#[test]
fn criterion_5_gradient_fidelity() {
    let _g = heavy_guard();
    let start = Instant::now();
    let cfg = ModelConfig {
        window_slices: 4,
        window_size: 5,
        d_model: 8,
        heads: 2,
        encoder_layers: 1,
        cnn_channels: vec![2, 4],
        classes: 6,
        dropout: 0.0,
        positional_encoding: true,
        use_transformer: true,
        seed: 2024,
    };
    let mut model = SequenceClassifier::new_seeded(cfg.clone()).unwrap();
    let seqs = toy_sequences();
    let refs: Vec<&SampleSeq> = seqs.iter().collect();
    let batch = BatchInput::from_sequences(&refs, &cfg).unwrap();

    let loss_of = |model: &SequenceClassifier| -> f64 {
        let mut g = Graph::new(0, false);
        let leaves = model.leaves(&mut g);
        let logits = model.forward(&mut g, &leaves, &batch).unwrap();
        let loss = g.cross_entropy(logits, &batch.labels, &batch.mask).unwrap();
        g.value(loss)[0]
    };

    // Analytic gradients.
    let mut g = Graph::new(0, false);
    let leaves = model.leaves(&mut g);
    let logits = model.forward(&mut g, &leaves, &batch).unwrap();
    let loss = g.cross_entropy(logits, &batch.labels, &batch.mask).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|&id| g.grad(id).to_vec()).collect();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let param_count = model.param_names().len();
    for p in 0..param_count {
        for j in 0..model.param_data(p).len() {
            let orig = model.param_data(p)[j];
            model.param_data_mut(p)[j] = orig + h;
            let up = loss_of(&model);
            model.param_data_mut(p)[j] = orig - h;
            let down = loss_of(&model);
            model.param_data_mut(p)[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[p][j];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-5);
            worst = worst.max(rel);
            checked += 1;
            assert!(
                rel < 1e-4,
                "param {p} entry {j}: analytic {an}, fd {fd}, rel {rel:.3e}"
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 60.0,
        "criterion 5 took {elapsed:?} (bound 60 s)"
    );
    println!(
        "[acceptance] criterion 5 (gradient fidelity): PASS — {checked} parameters, \
         max relative error {worst:.3e} < 1e-4, {elapsed:?}"
    );
}

/// In-process pipeline stages: phantoms → MPR → alignment → windows.
fn build_sequences(gen: &GeneratorConfig, n: usize, d: usize) -> Vec<SampleSeq> {
    let mpr_cfg = MprConfig::default();
    let specs = patient_specs(gen);
    specs
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
            let segment = crop_slices(
                &mpr,
                aligned.offset,
                aligned.offset + aligned.labels.len(),
            )
            .expect("crop");
            let normalized = normalize_min_max(&segment);
            split_sequence(&normalized, &aligned.labels, &id, n, d).expect("windows")
        })
        .collect()
}

fn split_by_fold(
    seqs: &[SampleSeq],
    folds: &plaquemap_core::dataset::FoldPlan,
    fold: usize,
) -> (Vec<SampleSeq>, Vec<SampleSeq>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in seqs {
        if folds.fold_of(&s.patient_id) == Some(fold) {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, test)
}

/// Criterion 6 — trainability on the standard synthetic dataset, plus the
/// single-batch overfit check.
#[test]
fn criterion_6_trainability() {
    let _g = heavy_guard();
    let start = Instant::now();
    let gen = GeneratorConfig {
        patients: 40,
        seed: 4040,
        mode: DatasetMode::Standard,
        ..GeneratorConfig::default()
    };
    let seqs = build_sequences(&gen, 12, 21);
    let ids: Vec<String> = seqs.iter().map(|s| s.patient_id.clone()).collect();
    let folds = make_folds(&ids, 5, 4040).unwrap();
    let (train, test) = split_by_fold(&seqs, &folds, 0);

    let mc = ModelConfig {
        window_slices: 12,
        window_size: 21,
        seed: 606,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs: 200,
        batch_sequences: 8,
        lr_peak: 1e-3,
        lr_floor: 1e-6,
        folds: 5,
        seed: 707,
    };
    let (_model, report) = train_fold(&train, &test, &mc, &tc).expect("training");
    let final_acc = report
        .history
        .last()
        .and_then(|s| s.val_accuracy)
        .expect("validation accuracy recorded");
    assert!(
        final_acc >= 0.90,
        "held-out per-window accuracy {final_acc} below 0.90"
    );

    // Overfit one batch of two sequences.
    let pair = &train[..2];
    let mc_overfit = ModelConfig {
        dropout: 0.0,
        seed: 909,
        ..mc.clone()
    };
    let tc_overfit = TrainConfig {
        epochs: 300,
        batch_sequences: 2,
        lr_peak: 3e-3,
        lr_floor: 1e-5,
        folds: 5,
        seed: 808,
    };
    let (_m, overfit) = train_fold(pair, &[], &mc_overfit, &tc_overfit).expect("overfit run");
    assert!(
        overfit.final_train_loss < 0.01,
        "single-batch loss {} not below 0.01 after 300 epochs",
        overfit.final_train_loss
    );

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 900.0,
        "criterion 6 took {elapsed:?} (bound 15 min)"
    );
    println!(
        "[acceptance] criterion 6 (trainability): PASS — held-out accuracy {final_acc:.4}, \
         single-batch loss {:.2e}, {elapsed:?}",
        overfit.final_train_loss
    );
}

/// Criterion 7 — context benefit: the sequence model beats the per-window
/// baseline by ≥ 0.05 mean AUC in at least 4 of 5 folds.
#[test]
fn criterion_7_context_benefit() {
    let _g = heavy_guard();
    let start = Instant::now();
    let gen = GeneratorConfig {
        patients: 16,
        seed: 7007,
        mode: DatasetMode::ContextDependent,
        vessel_length_range: (55.0, 70.0),
        ..GeneratorConfig::default()
    };
    let seqs = build_sequences(&gen, 6, 15);
    let ids: Vec<String> = seqs.iter().map(|s| s.patient_id.clone()).collect();
    let folds = make_folds(&ids, 5, 7007).unwrap();

    let mut wins = 0;
    let mut gaps = Vec::new();
    for fold in 0..5 {
        let (train, test) = split_by_fold(&seqs, &folds, fold);
        let mc = ModelConfig {
            window_slices: 6,
            window_size: 15,
            d_model: 48,
            heads: 4,
            encoder_layers: 2,
            cnn_channels: vec![6, 12],
            classes: 6,
            dropout: 0.05,
            positional_encoding: true,
            use_transformer: true,
            seed: 100 + fold as u64,
        };
        let tc = TrainConfig {
            epochs: 150,
            batch_sequences: 4,
            lr_peak: 1e-3,
            lr_floor: 1e-6,
            folds: 5,
            seed: 200 + fold as u64,
        };
        let (full_model, _) = train_fold(&train, &test, &mc, &tc).expect("full model");
        let mut bc = mc.clone();
        bc.use_transformer = false;
        let (base_model, _) = train_fold(&train, &test, &bc, &tc).expect("baseline");

        let full_auc = mean_auc_of(&full_model, &test);
        let base_auc = mean_auc_of(&base_model, &test);
        let gap = full_auc - base_auc;
        gaps.push((fold, full_auc, base_auc, gap));
        if gap >= 0.05 {
            wins += 1;
        }
    }
    for (fold, full, base, gap) in &gaps {
        println!(
            "  fold {fold}: full {full:.4}, baseline {base:.4}, gap {gap:+.4}"
        );
    }
    assert!(
        wins >= 4,
        "context benefit ≥ 0.05 in only {wins} of 5 folds: {gaps:?}"
    );
    let elapsed = start.elapsed();
    println!(
        "[acceptance] criterion 7 (context benefit): PASS — gap ≥ 0.05 in {wins}/5 folds, \
         {elapsed:?}"
    );
}

fn mean_auc_of(model: &SequenceClassifier, seqs: &[SampleSeq]) -> f64 {
    let probs = model.predict(seqs).expect("inference");
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for (s, sp) in seqs.iter().zip(&probs) {
        for (pos, row) in sp.iter().enumerate() {
            scores.push(row.clone());
            truth.push(s.labels[pos]);
        }
    }
    let (mean, _) = plaquemap_core::metrics::mean_auc(&scores, &truth, 6).expect("auc");
    mean.expect("at least one computable class")
}

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_plaquemap")
}

fn write_small_pipeline_config(path: &Path, seed: u64) {
    let config = serde_json::json!({
        "seed": seed,
        "generator": {
            "patients": 6,
            "mode": "standard",
            "vessel_length_range": [55.0, 65.0]
        },
        "window_size": 15,
        "model": {
            "d_model": 16,
            "heads": 2,
            "encoder_layers": 1,
            "cnn_channels": [4, 8],
            "dropout": 0.0
        },
        "train": { "epochs": 3, "batch_sequences": 4 },
        "folds": 2,
        "folds_to_run": [0]
    });
    std::fs::write(path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
}

/// Criterion 8 — the ablation harness runs the window-count axis and
/// emits a three-row comparison table, deterministically.
#[test]
fn criterion_8_ablation_harness() {
    let _g = heavy_guard();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("pipeline.json");
    write_small_pipeline_config(&cfg_path, 88);

    let run = |out: &Path| {
        let status = Command::new(binary())
            .arg("pipeline")
            .arg("--config")
            .arg(&cfg_path)
            .arg("--out")
            .arg(out)
            .args(["--ablate-n", "6,9,12"])
            .status()
            .expect("pipeline runs");
        assert!(status.success(), "ablation pipeline failed");
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run(&out_a);
    run(&out_b);

    let table = std::fs::read_to_string(out_a.join("ablation.csv")).unwrap();
    assert_eq!(
        table.lines().next(),
        Some("n,fold,Healthy,Calcified,Lipid-rich,Fibrous,Thrombus,Stent,Mean,ACC"),
        "summary column layout changed:\n{table}"
    );
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "expected three ablation rows:\n{table}");
    for (row, n) in rows.iter().zip(["6", "9", "12"]) {
        assert!(row.starts_with(&format!("{n},")), "row {row:?}");
    }
    let table_b = std::fs::read_to_string(out_b.join("ablation.csv")).unwrap();
    assert_eq!(table, table_b, "ablation table not deterministic");

    println!(
        "[acceptance] criterion 8 (ablation harness): PASS — three rows over \
         window counts 6/9/12, deterministic"
    );
}

/// Hash every file under a tree except timing.json (wall time is the one
/// documented non-deterministic output).
fn tree_digest(root: &Path) -> Vec<(String, u64)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, u64)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for entry in entries {
            if entry.is_dir() {
                walk(root, &entry, out);
            } else {
                let rel = entry.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                if rel.ends_with("timing.json") {
                    continue;
                }
                let bytes = std::fs::read(&entry).unwrap();
                // FNV-1a is plenty for equality checking here.
                let mut h = 0xcbf2_9ce4_8422_2325u64;
                for b in bytes {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x1000_0000_01b3);
                }
                out.push((rel, h));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

/// Criterion 9 — same seed, byte-identical manifests, checkpoints, and
/// reports.
#[test]
fn criterion_9_determinism() {
    let _g = heavy_guard();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("pipeline.json");
    write_small_pipeline_config(&cfg_path, 99);

    let run = |out: &Path| {
        let status = Command::new(binary())
            .arg("pipeline")
            .arg("--config")
            .arg(&cfg_path)
            .arg("--out")
            .arg(out)
            .status()
            .expect("pipeline runs");
        assert!(status.success(), "pipeline failed");
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run(&out_a);
    run(&out_b);

    let da = tree_digest(&out_a);
    let db = tree_digest(&out_b);
    assert_eq!(da.len(), db.len(), "output trees differ in file count");
    for ((ra, ha), (rb, hb)) in da.iter().zip(&db) {
        assert_eq!(ra, rb, "file sets differ");
        assert_eq!(ha, hb, "file {ra} differs between identical-seed runs");
    }
    // Spot-check that the interesting artifacts exist.
    for required in [
        "manifest.json",
        "summary.csv",
        "n12/fold0/checkpoint/weights.f64",
        "n12/fold0/checkpoint/checkpoint.json",
        "n12/fold0/eval/summary.json",
    ] {
        assert!(
            out_a.join(required).exists(),
            "missing expected artifact {required}"
        );
    }
    println!(
        "[acceptance] criterion 9 (determinism): PASS — {} files byte-identical \
         across identical-seed runs",
        da.len()
    );
}
