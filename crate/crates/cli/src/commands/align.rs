use crate::manifest::RunContext;
use crate::{CliError, CliResult};
use anyhow::Context;
use plaquemap_core::align::{base_ratio, build_alignment, AlignmentMap};
use plaquemap_core::volio::{LabelSeq, ReferencePairs, Taxonomy, VolumeHeader};
use serde::Serialize;
use std::path::PathBuf;

#[derive(clap::Args)]
pub struct Args {
    /// Pullback label CSV (fine taxonomy).
    #[arg(long)]
    pub oct_labels: PathBuf,
    /// Reference pair CSV.
    #[arg(long)]
    pub references: PathBuf,
    /// MPR volume header (slice count and thickness are read from it).
    #[arg(long)]
    pub mpr: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// JSON alignment report: ratios, endpoints, clamp log.
#[derive(Serialize)]
struct AlignReport {
    gamma_base: f64,
    segment_start: usize,
    segment_end: usize,
    segment_len: usize,
    map: AlignmentMap,
}

pub fn run(args: Args) -> CliResult {
    let mut ctx = RunContext::new("align", None, serde_json::Value::Null);
    ctx.record_input("oct_labels", &args.oct_labels)?;
    ctx.record_input("references", &args.references)?;
    ctx.record_input("mpr_header", &args.mpr)?;

    let labels = LabelSeq::load(&args.oct_labels)
        .context("loading pullback labels")
        .map_err(CliError::Runtime)?;
    if labels.taxonomy() != Taxonomy::Oct6 {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "pullback labels must use the fine 6-class taxonomy"
        )));
    }
    let refs = ReferencePairs::load(&args.references)
        .context("loading references")
        .map_err(CliError::Runtime)?;
    let header_text = std::fs::read_to_string(&args.mpr)
        .with_context(|| format!("reading {}", args.mpr.display()))
        .map_err(CliError::Runtime)?;
    let header: VolumeHeader = serde_json::from_str(&header_text)
        .context("parsing MPR header")
        .map_err(CliError::Runtime)?;
    let mpr_len = header.dims[0];
    let mpr_thickness = header.spacing_mm[0];

    let map = build_alignment(
        &refs,
        labels.len(),
        mpr_len,
        labels.slice_thickness_mm(),
        mpr_thickness,
    )
    .context("building the alignment transform")
    .map_err(CliError::Runtime)?;
    let aligned = plaquemap_core::align::align_labels(&labels, &map, mpr_thickness)
        .context("transferring labels")
        .map_err(CliError::Runtime)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(CliError::Runtime)?;
    aligned
        .labels
        .save(&args.out.join("mpr_labels.csv"))
        .context("writing aligned labels")
        .map_err(CliError::Runtime)?;
    let report = AlignReport {
        gamma_base: base_ratio(labels.slice_thickness_mm(), mpr_thickness)
            .expect("thicknesses validated by build_alignment"),
        segment_start: map.segment_start(),
        segment_end: map.segment_end(),
        segment_len: aligned.labels.len(),
        map,
    };
    let report_path = args.out.join("alignment.json");
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .with_context(|| format!("writing {}", report_path.display()))
    .map_err(CliError::Runtime)?;

    ctx.record_output("mpr_labels.csv");
    ctx.record_output("alignment.json");
    ctx.finish(&args.out)?;
    Ok(())
}
