use super::{load_config, mix_seed, resolve_archive};
use crate::manifest::RunContext;
use crate::{config_err, CliError, CliResult};
use anyhow::Context;
use plaquemap_core::dataset::read_archive;
use plaquemap_core::model::{save_checkpoint, train_fold, ModelConfig, TrainConfig};
use std::path::PathBuf;

#[derive(clap::Args)]
pub struct Args {
    /// Sequence archive directory (or the dataset output dir).
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out fold index.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Model config JSON (window shape is taken from the archive).
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Train config JSON; flags override its fields.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr_peak: Option<f64>,
    #[arg(long)]
    pub lr_floor: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drop the sequence encoder: per-window CNN classification only.
    #[arg(long, default_value_t = false)]
    pub baseline: bool,
}

pub fn run(args: Args) -> CliResult {
    let archive_dir = resolve_archive(&args.dataset);
    let mut mc: ModelConfig = load_config(&args.model_config)?;
    let mut tc: TrainConfig = load_config(&args.train_config)?;
    if let Some(v) = args.epochs {
        tc.epochs = v;
    }
    if let Some(v) = args.batch {
        tc.batch_sequences = v;
    }
    if let Some(v) = args.lr_peak {
        tc.lr_peak = v;
    }
    if let Some(v) = args.lr_floor {
        tc.lr_floor = v;
    }
    if let Some(seed) = args.seed {
        tc.seed = seed;
        mc.seed = mix_seed(seed, 0x6d);
    }
    if tc.epochs == 0 {
        return Err(config_err("epochs must be at least 1"));
    }
    if args.baseline {
        mc.use_transformer = false;
    }

    let (sequences, archive) = read_archive(&archive_dir)
        .context("reading sequence archive")
        .map_err(CliError::Runtime)?;
    mc.window_slices = archive.n;
    mc.window_size = archive.d;
    mc.validate().map_err(|e| config_err(e.to_string()))?;
    if args.fold >= archive.folds.k {
        return Err(config_err(format!(
            "fold {} out of range for {} folds",
            args.fold, archive.folds.k
        )));
    }

    let mut ctx = RunContext::new(
        "train",
        Some(tc.seed),
        serde_json::json!({ "model": mc, "train": tc, "fold": args.fold }),
    );
    ctx.record_input("dataset", &archive_dir)?;
    if let Some(p) = &args.model_config {
        ctx.record_input("model_config", p)?;
    }
    if let Some(p) = &args.train_config {
        ctx.record_input("train_config", p)?;
    }

    let mut train_set = Vec::new();
    let mut val_set = Vec::new();
    for seq in sequences {
        if archive.folds.fold_of(&seq.patient_id) == Some(args.fold) {
            val_set.push(seq);
        } else {
            train_set.push(seq);
        }
    }
    let (model, report) = train_fold(&train_set, &val_set, &mc, &tc)
        .context("training")
        .map_err(CliError::Runtime)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(CliError::Runtime)?;
    save_checkpoint(&model, &args.out.join("checkpoint"))
        .context("saving checkpoint")
        .map_err(CliError::Runtime)?;
    std::fs::write(args.out.join("history.csv"), report.history_csv())
        .context("writing history")
        .map_err(CliError::Runtime)?;

    ctx.record_output("checkpoint");
    ctx.record_output("history.csv");
    ctx.finish(&args.out)?;
    Ok(())
}
