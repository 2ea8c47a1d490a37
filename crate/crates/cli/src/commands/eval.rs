use super::resolve_archive;
use crate::manifest::RunContext;
use crate::pixmap;
use crate::{config_err, CliError, CliResult};
use anyhow::Context;
use plaquemap_core::dataset::{map_to_ccta3, read_archive, SampleSeq};
use plaquemap_core::metrics::{accuracy, agreement_report, mean_auc, BinarizationRule};
use plaquemap_core::model::{load_checkpoint, SequenceClassifier};
use plaquemap_core::volio::{LabelSeq, OctClass, Taxonomy};
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Note carried into every agreement report: the chance-corrected formula
/// on the canonical 2×2 benchmark counts.
pub const KAPPA_BENCHMARK_NOTE: &str = "kappa follows the chance-corrected formula \
(p_o - p_e)/(1 - p_e); on the canonical 2x2 benchmark counts [[121,190],[140,128]] \
it evaluates to -0.1316, not the 0.113 sometimes quoted for that table";

#[derive(clap::Args)]
pub struct Args {
    /// Sequence archive directory (or the dataset output dir).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out fold to evaluate.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
}

/// Per-fold evaluation results in the reference table layout.
#[derive(Debug, Clone, Serialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub windows: usize,
    /// One-vs-rest AUC per fine class, None when undefined on this fold.
    pub per_class_auc: Vec<Option<f64>>,
    pub mean_auc: Option<f64>,
    pub accuracy: f64,
}

pub fn summary_csv_header() -> String {
    let mut cols: Vec<&str> = vec!["fold"];
    cols.extend(OctClass::ALL.iter().map(|c| c.display_name()));
    cols.push("Mean");
    cols.push("ACC");
    cols.join(",")
}

pub fn summary_csv_row(label: &str, s: &FoldSummary) -> String {
    let mut cols = vec![label.to_string()];
    for auc in &s.per_class_auc {
        cols.push(auc.map_or(String::new(), |v| format!("{v:.4}")));
    }
    cols.push(s.mean_auc.map_or(String::new(), |v| format!("{v:.4}")));
    cols.push(format!("{:.4}", s.accuracy));
    cols.join(",")
}

/// Predict a set of sequences and compute the summary plus per-sequence
/// predicted labels.
pub fn evaluate_sequences(
    model: &SequenceClassifier,
    seqs: &[SampleSeq],
    fold: usize,
) -> Result<(FoldSummary, Vec<Vec<u8>>), CliError> {
    let probs = model
        .predict(seqs)
        .context("running inference")
        .map_err(CliError::Runtime)?;
    let mut flat_scores: Vec<Vec<f64>> = Vec::new();
    let mut flat_truth: Vec<u8> = Vec::new();
    let mut per_seq_pred: Vec<Vec<u8>> = Vec::new();
    for (s, sp) in seqs.iter().zip(&probs) {
        let mut preds = Vec::with_capacity(sp.len());
        for (pos, row) in sp.iter().enumerate() {
            flat_scores.push(row.clone());
            flat_truth.push(s.labels[pos]);
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
                .map(|(i, _)| i as u8)
                .unwrap_or(0);
            preds.push(arg);
        }
        per_seq_pred.push(preds);
    }
    let flat_pred: Vec<u8> = per_seq_pred.iter().flatten().copied().collect();
    let acc = accuracy(&flat_pred, &flat_truth)
        .context("computing accuracy")
        .map_err(CliError::Runtime)?;
    let (mean, per_class) = mean_auc(&flat_scores, &flat_truth, OctClass::COUNT)
        .context("computing AUC")
        .map_err(CliError::Runtime)?;
    Ok((
        FoldSummary {
            fold,
            windows: flat_truth.len(),
            per_class_auc: per_class,
            mean_auc: mean,
            accuracy: acc,
        },
        per_seq_pred,
    ))
}

/// Write the summary, per-patient strips (CSV + pixmap), and the coarse
/// agreement report for one evaluated fold.
pub fn write_eval_outputs(
    out: &Path,
    summary: &FoldSummary,
    seqs: &[SampleSeq],
    per_seq_pred: &[Vec<u8>],
) -> Result<(), CliError> {
    std::fs::create_dir_all(out.join("strips"))
        .with_context(|| format!("creating {}", out.display()))
        .map_err(CliError::Runtime)?;

    let csv = format!(
        "{}\n{}\n",
        summary_csv_header(),
        summary_csv_row(&summary.fold.to_string(), summary)
    );
    std::fs::write(out.join("summary.csv"), csv)
        .context("writing summary.csv")
        .map_err(CliError::Runtime)?;
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(summary).expect("summary serializes"),
    )
    .context("writing summary.json")
    .map_err(CliError::Runtime)?;

    // Per-patient label strips: aligned annotation vs prediction.
    let mut truth_all: Vec<u8> = Vec::new();
    let mut pred_all: Vec<u8> = Vec::new();
    for (s, preds) in seqs.iter().zip(per_seq_pred) {
        let mut strip_csv = String::from("window,annotation,prediction\n");
        for (w, (&t, &p)) in s.labels.iter().zip(preds).enumerate() {
            let tn = OctClass::from_id(t).map(|c| c.name()).unwrap_or("?");
            let pn = OctClass::from_id(p).map(|c| c.name()).unwrap_or("?");
            strip_csv.push_str(&format!("{w},{tn},{pn}\n"));
        }
        std::fs::write(
            out.join("strips").join(format!("{}.csv", s.patient_id)),
            strip_csv,
        )
        .context("writing strip CSV")
        .map_err(CliError::Runtime)?;
        pixmap::write_strips(
            &out.join("strips").join(format!("{}.ppm", s.patient_id)),
            &[("annotation", &s.labels), ("prediction", preds)],
        )
        .map_err(CliError::Runtime)?;
        truth_all.extend_from_slice(&s.labels);
        pred_all.extend_from_slice(preds);
    }

    // Coarse-taxonomy agreement between annotation and prediction.
    let truth_seq = LabelSeq::new(Taxonomy::Oct6, truth_all, 1.0)
        .context("assembling truth labels")
        .map_err(CliError::Runtime)?;
    let pred_seq = LabelSeq::new(Taxonomy::Oct6, pred_all, 1.0)
        .context("assembling predicted labels")
        .map_err(CliError::Runtime)?;
    let mut agreement = agreement_report(
        &map_to_ccta3(&truth_seq),
        &map_to_ccta3(&pred_seq),
        &BinarizationRule::default(),
    )
    .context("computing agreement")
    .map_err(CliError::Runtime)?;
    agreement.notes.push(KAPPA_BENCHMARK_NOTE.to_string());
    std::fs::write(
        out.join("agreement.json"),
        serde_json::to_string_pretty(&agreement).expect("agreement serializes"),
    )
    .context("writing agreement.json")
    .map_err(CliError::Runtime)?;
    std::fs::write(out.join("agreement.csv"), agreement.to_csv())
        .context("writing agreement.csv")
        .map_err(CliError::Runtime)?;
    Ok(())
}

pub fn run(args: Args) -> CliResult {
    let archive_dir = resolve_archive(&args.dataset);
    let (sequences, archive) = read_archive(&archive_dir)
        .context("reading sequence archive")
        .map_err(CliError::Runtime)?;
    if args.fold >= archive.folds.k {
        return Err(config_err(format!(
            "fold {} out of range for {} folds",
            args.fold, archive.folds.k
        )));
    }
    let model = load_checkpoint(&args.checkpoint.join("checkpoint"))
        .or_else(|_| load_checkpoint(&args.checkpoint))
        .context("loading checkpoint")
        .map_err(CliError::Runtime)?;
    if model.config().window_slices != archive.n || model.config().window_size != archive.d {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "incompatible checkpoint: windows {}×{}×{} vs archive {}×{}×{}",
            model.config().window_slices,
            model.config().window_size,
            model.config().window_size,
            archive.n,
            archive.d,
            archive.d
        )));
    }

    let mut ctx = RunContext::new(
        "eval",
        None,
        serde_json::json!({ "fold": args.fold }),
    );
    ctx.record_input("dataset", &archive_dir)?;
    ctx.record_input("checkpoint", &args.checkpoint)?;

    let held_out: Vec<SampleSeq> = sequences
        .into_iter()
        .filter(|s| archive.folds.fold_of(&s.patient_id) == Some(args.fold))
        .collect();
    if held_out.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "fold {} holds no patients",
            args.fold
        )));
    }
    let (summary, per_seq_pred) = evaluate_sequences(&model, &held_out, args.fold)?;
    write_eval_outputs(&args.out, &summary, &held_out, &per_seq_pred)?;

    println!("{}", summary_csv_header());
    println!("{}", summary_csv_row(&args.fold.to_string(), &summary));

    ctx.record_output("summary.csv");
    ctx.record_output("summary.json");
    ctx.record_output("agreement.json");
    ctx.record_output("agreement.csv");
    ctx.record_output("strips");
    ctx.finish(&args.out)?;
    Ok(())
}
