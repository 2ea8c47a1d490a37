use super::eval::{evaluate_sequences, summary_csv_header, summary_csv_row, write_eval_outputs, FoldSummary};
use super::{load_config, mix_seed};
use crate::manifest::RunContext;
use crate::{config_err, CliError, CliResult};
use anyhow::Context;
use plaquemap_core::align::{align_labels, build_alignment};
use plaquemap_core::dataset::{make_folds, write_archive};
use plaquemap_core::model::{save_checkpoint, train_fold, ModelConfig, TrainConfig};
use plaquemap_core::mprrec::{reconstruct_mpr, MprConfig};
use plaquemap_core::synth::{gen_phantom, patient_specs, GeneratorConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// End-to-end run parameters. The master `seed` deterministically derives
/// every stage seed; per-stage seed fields in nested configs are ignored
/// by the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub mpr: MprConfig,
    /// Window slice count (the ablation axis).
    pub window_slices: usize,
    pub window_size: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: usize,
    /// Subset of folds to run; all when absent.
    pub folds_to_run: Option<Vec<usize>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            generator: GeneratorConfig {
                patients: 10,
                ..GeneratorConfig::default()
            },
            mpr: MprConfig::default(),
            window_slices: 12,
            window_size: 21,
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 25,
                ..TrainConfig::default()
            },
            folds: 5,
            folds_to_run: None,
        }
    }
}

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub patients: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Comma-separated window slice counts to compare (e.g. "6,9,12").
    #[arg(long)]
    pub ablate_n: Option<String>,
    /// Comma-separated fold subset (e.g. "0,1").
    #[arg(long)]
    pub run_folds: Option<String>,
    /// Also train the context-free CNN baseline for comparison.
    #[arg(long, default_value_t = false)]
    pub baseline: bool,
}

fn parse_list(text: &str, what: &str) -> Result<Vec<usize>, CliError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| config_err(format!("bad {what} entry {t:?}: {e}")))
        })
        .collect()
}

pub fn run(args: Args) -> CliResult {
    let mut cfg: PipelineConfig = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(p) = args.patients {
        cfg.generator.patients = p;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(folds) = &args.run_folds {
        cfg.folds_to_run = Some(parse_list(folds, "fold")?);
    }
    let ablation: Vec<usize> = match &args.ablate_n {
        Some(text) => parse_list(text, "window count")?,
        None => vec![cfg.window_slices],
    };
    if ablation.is_empty() || ablation.iter().any(|&n| n == 0) {
        return Err(config_err("window counts must be positive"));
    }
    if cfg.folds < 2 {
        return Err(config_err("folds must be at least 2"));
    }
    if cfg.generator.patients < cfg.folds {
        return Err(config_err(format!(
            "{} patients cannot fill {} folds",
            cfg.generator.patients, cfg.folds
        )));
    }
    if let Some(folds) = &cfg.folds_to_run {
        if folds.iter().any(|&f| f >= cfg.folds) {
            return Err(config_err("folds_to_run entry out of range"));
        }
    }

    let mut ctx = RunContext::new(
        "pipeline",
        Some(cfg.seed),
        serde_json::json!({ "pipeline": cfg, "ablate_n": ablation, "baseline": args.baseline }),
    );
    if let Some(p) = &args.config {
        ctx.record_input("config", p)?;
    }

    let summary_lines = run_pipeline(&cfg, &ablation, args.baseline, &args.out)?;
    println!("{summary_lines}");

    ctx.record_output("phantoms");
    ctx.record_output("work");
    for &n in &ablation {
        ctx.record_output(format!("n{n}"));
    }
    ctx.record_output("summary.csv");
    if ablation.len() > 1 {
        ctx.record_output("ablation.csv");
    }
    ctx.finish(&args.out)?;
    Ok(())
}

/// Execute all stages; returns the printed summary text.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    ablation: &[usize],
    with_baseline: bool,
    out: &Path,
) -> Result<String, CliError> {
    // Stage seeds derived from the master seed.
    let mut generator = cfg.generator.clone();
    generator.seed = mix_seed(cfg.seed, 1);
    let fold_seed = mix_seed(cfg.seed, 2);
    let model_seed = mix_seed(cfg.seed, 3);
    let train_seed = mix_seed(cfg.seed, 4);

    // 1. Phantoms.
    let specs = patient_specs(&generator);
    let phantom_dir = out.join("phantoms");
    std::fs::create_dir_all(&phantom_dir)
        .with_context(|| format!("creating {}", phantom_dir.display()))
        .map_err(CliError::Runtime)?;

    // 2. Reconstruction + alignment per patient.
    let work_dir = out.join("work");
    let mut patient_ids = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let id = format!("p{i:03}");
        let bundle = gen_phantom(spec)
            .with_context(|| format!("generating phantom {id}"))
            .map_err(CliError::Runtime)?;
        plaquemap_core::synth::write_bundle(&phantom_dir.join(&id), &bundle)
            .with_context(|| format!("writing phantom {id}"))
            .map_err(CliError::Runtime)?;

        let mpr = reconstruct_mpr(&bundle.ccta, &bundle.centerline, &cfg.mpr)
            .with_context(|| format!("reconstructing MPR for {id}"))
            .map_err(CliError::Runtime)?;
        let map = build_alignment(
            &bundle.references,
            bundle.oct_labels.len(),
            mpr.dims()[0],
            bundle.oct_labels.slice_thickness_mm(),
            mpr.spacing_mm()[0],
        )
        .with_context(|| format!("aligning {id}"))
        .map_err(CliError::Runtime)?;
        let aligned = align_labels(&bundle.oct_labels, &map, mpr.spacing_mm()[0])
            .with_context(|| format!("transferring labels for {id}"))
            .map_err(CliError::Runtime)?;

        let pdir = work_dir.join(&id);
        std::fs::create_dir_all(&pdir)
            .with_context(|| format!("creating {}", pdir.display()))
            .map_err(CliError::Runtime)?;
        mpr.save(&pdir.join("mpr.json"))
            .with_context(|| format!("writing MPR for {id}"))
            .map_err(CliError::Runtime)?;
        aligned
            .labels
            .save(&pdir.join("mpr_labels.csv"))
            .with_context(|| format!("writing labels for {id}"))
            .map_err(CliError::Runtime)?;
        let report = serde_json::json!({
            "segment_start": aligned.offset,
            "segment_len": aligned.labels.len(),
            "map": map,
        });
        std::fs::write(
            pdir.join("alignment.json"),
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )
        .context("writing alignment report")
        .map_err(CliError::Runtime)?;
        patient_ids.push(id);
    }

    // 3..5 per window count: dataset, folds, train, eval.
    let folds_to_run: Vec<usize> = cfg
        .folds_to_run
        .clone()
        .unwrap_or_else(|| (0..cfg.folds).collect());
    let mut summary = String::new();
    summary.push_str(&format!("n,{}\n", summary_csv_header()));
    let mut ablation_rows: Vec<(usize, FoldSummary)> = Vec::new();

    for &n in ablation {
        let ndir = out.join(format!("n{n}"));
        let (sequences, ids) =
            super::dataset::assemble_sequences(&work_dir, n, cfg.window_size)?;
        debug_assert_eq!(ids, patient_ids);
        let folds = make_folds(&ids, cfg.folds, fold_seed)
            .context("assigning folds")
            .map_err(CliError::Runtime)?;
        let archive_dir = ndir.join("archive");
        write_archive(&archive_dir, &sequences, &folds, fold_seed)
            .context("writing archive")
            .map_err(CliError::Runtime)?;

        let mut fold_summaries = Vec::new();
        for &fold in &folds_to_run {
            let mut mc = cfg.model.clone();
            mc.window_slices = n;
            mc.window_size = cfg.window_size;
            mc.seed = mix_seed(model_seed, (n * 100 + fold) as u64);
            mc.validate().map_err(|e| config_err(e.to_string()))?;
            let mut tc = cfg.train.clone();
            tc.folds = cfg.folds;
            tc.seed = mix_seed(train_seed, (n * 100 + fold) as u64);

            let mut train_set = Vec::new();
            let mut val_set = Vec::new();
            for seq in sequences.iter().cloned() {
                if folds.fold_of(&seq.patient_id) == Some(fold) {
                    val_set.push(seq);
                } else {
                    train_set.push(seq);
                }
            }
            let fdir = ndir.join(format!("fold{fold}"));
            let (model, report) = train_fold(&train_set, &val_set, &mc, &tc)
                .with_context(|| format!("training n={n} fold {fold}"))
                .map_err(CliError::Runtime)?;
            save_checkpoint(&model, &fdir.join("checkpoint"))
                .context("saving checkpoint")
                .map_err(CliError::Runtime)?;
            std::fs::write(fdir.join("history.csv"), report.history_csv())
                .context("writing history")
                .map_err(CliError::Runtime)?;

            let (fold_summary, per_seq_pred) = evaluate_sequences(&model, &val_set, fold)?;
            write_eval_outputs(&fdir.join("eval"), &fold_summary, &val_set, &per_seq_pred)?;
            summary.push_str(&format!(
                "{n},{}\n",
                summary_csv_row(&fold.to_string(), &fold_summary)
            ));
            fold_summaries.push(fold_summary);

            if with_baseline {
                let mut bc = mc.clone();
                bc.use_transformer = false;
                let bdir = ndir.join(format!("fold{fold}_baseline"));
                let (bmodel, breport) = train_fold(&train_set, &val_set, &bc, &tc)
                    .with_context(|| format!("training baseline n={n} fold {fold}"))
                    .map_err(CliError::Runtime)?;
                save_checkpoint(&bmodel, &bdir.join("checkpoint"))
                    .context("saving baseline checkpoint")
                    .map_err(CliError::Runtime)?;
                std::fs::write(bdir.join("history.csv"), breport.history_csv())
                    .context("writing baseline history")
                    .map_err(CliError::Runtime)?;
                let (bsummary, bpred) = evaluate_sequences(&bmodel, &val_set, fold)?;
                write_eval_outputs(&bdir.join("eval"), &bsummary, &val_set, &bpred)?;
                summary.push_str(&format!(
                    "{n},{}\n",
                    summary_csv_row(&format!("{fold}-baseline"), &bsummary)
                ));
            }
        }
        ablation_rows.push((n, aggregate(&fold_summaries)));
    }

    // Aggregate rows per window count.
    for (n, agg) in &ablation_rows {
        summary.push_str(&format!("{n},{}\n", summary_csv_row("mean", agg)));
    }
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(CliError::Runtime)?;
    std::fs::write(out.join("summary.csv"), &summary)
        .context("writing summary.csv")
        .map_err(CliError::Runtime)?;
    if ablation.len() > 1 {
        let mut ab = format!("n,{}\n", summary_csv_header());
        for (n, agg) in &ablation_rows {
            ab.push_str(&format!("{n},{}\n", summary_csv_row("mean", agg)));
        }
        std::fs::write(out.join("ablation.csv"), ab)
            .context("writing ablation.csv")
            .map_err(CliError::Runtime)?;
    }
    Ok(summary)
}

/// Unweighted mean of fold summaries (AUC means skip undefined entries).
fn aggregate(folds: &[FoldSummary]) -> FoldSummary {
    let classes = folds.first().map(|f| f.per_class_auc.len()).unwrap_or(0);
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let vals: Vec<f64> = folds.iter().filter_map(|f| f.per_class_auc[c]).collect();
        per_class.push(if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        });
    }
    let means: Vec<f64> = folds.iter().filter_map(|f| f.mean_auc).collect();
    FoldSummary {
        fold: 0,
        windows: folds.iter().map(|f| f.windows).sum(),
        per_class_auc: per_class,
        mean_auc: if means.is_empty() {
            None
        } else {
            Some(means.iter().sum::<f64>() / means.len() as f64)
        },
        accuracy: folds.iter().map(|f| f.accuracy).sum::<f64>() / folds.len().max(1) as f64,
    }
}

