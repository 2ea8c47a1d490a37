use super::load_config;
use crate::manifest::RunContext;
use crate::{config_err, CliError, CliResult};
use anyhow::Context;
use plaquemap_core::dataset::{
    crop_slices, make_folds, normalize_min_max, split_sequence, write_archive,
};
use plaquemap_core::volio::{LabelSeq, Volume3D};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Windowing and fold parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    pub n: usize,
    pub d: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            n: 12,
            d: 21,
            folds: 5,
            seed: 0,
        }
    }
}

#[derive(clap::Args)]
pub struct Args {
    /// Directory of per-patient work dirs, each holding mpr.json,
    /// mpr_labels.csv, and alignment.json.
    #[arg(long, value_name = "DIR")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Window slice count.
    #[arg(long)]
    pub n: Option<usize>,
    /// Window cross-section edge.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Deserialize)]
struct AlignReportOffsets {
    segment_start: usize,
    segment_len: usize,
}

pub fn run(args: Args) -> CliResult {
    let mut params: DatasetParams = load_config(&args.config)?;
    if let Some(v) = args.n {
        params.n = v;
    }
    if let Some(v) = args.d {
        params.d = v;
    }
    if let Some(v) = args.folds {
        params.folds = v;
    }
    if let Some(v) = args.seed {
        params.seed = v;
    }
    if params.n == 0 || params.d == 0 {
        return Err(config_err("window shape must be positive"));
    }
    if params.folds < 2 {
        return Err(config_err("folds must be at least 2"));
    }

    let mut ctx = RunContext::new(
        "dataset",
        Some(params.seed),
        serde_json::to_value(&params).expect("params serialize"),
    );
    ctx.record_input("input", &args.input)?;

    let (sequences, ids) = assemble_sequences(&args.input, params.n, params.d)?;
    let folds = make_folds(&ids, params.folds, params.seed)
        .context("assigning folds")
        .map_err(CliError::Runtime)?;
    write_archive(&args.out.join("archive"), &sequences, &folds, params.seed)
        .context("writing sequence archive")
        .map_err(CliError::Runtime)?;
    ctx.record_output("archive");
    ctx.finish(&args.out)?;
    Ok(())
}

/// Load every patient work dir under `input` and window it.
pub fn assemble_sequences(
    input: &std::path::Path,
    n: usize,
    d: usize,
) -> Result<(Vec<plaquemap_core::dataset::SampleSeq>, Vec<String>), CliError> {
    let mut patient_dirs: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))
        .map_err(CliError::Runtime)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("mpr.json").exists())
        .collect();
    patient_dirs.sort();
    if patient_dirs.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "no patient work dirs with mpr.json under {}",
            input.display()
        )));
    }
    let mut sequences = Vec::with_capacity(patient_dirs.len());
    let mut ids = Vec::with_capacity(patient_dirs.len());
    for dir in &patient_dirs {
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "unknown".to_string());
        let mpr = Volume3D::load(&dir.join("mpr.json"))
            .with_context(|| format!("loading MPR for {id}"))
            .map_err(CliError::Runtime)?;
        let labels = LabelSeq::load(&dir.join("mpr_labels.csv"))
            .with_context(|| format!("loading labels for {id}"))
            .map_err(CliError::Runtime)?;
        let report_text = std::fs::read_to_string(dir.join("alignment.json"))
            .with_context(|| format!("reading alignment report for {id}"))
            .map_err(CliError::Runtime)?;
        let offsets: AlignReportOffsets = serde_json::from_str(&report_text)
            .with_context(|| format!("parsing alignment report for {id}"))
            .map_err(CliError::Runtime)?;
        let segment = crop_slices(
            &mpr,
            offsets.segment_start,
            offsets.segment_start + offsets.segment_len,
        )
        .with_context(|| format!("cropping aligned segment for {id}"))
        .map_err(CliError::Runtime)?;
        let normalized = normalize_min_max(&segment);
        let seq = split_sequence(&normalized, &labels, &id, n, d)
            .with_context(|| format!("windowing {id}"))
            .map_err(CliError::Runtime)?;
        sequences.push(seq);
        ids.push(id);
    }
    Ok((sequences, ids))
}
