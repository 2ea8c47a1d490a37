use super::eval::KAPPA_BENCHMARK_NOTE;
use crate::manifest::RunContext;
use crate::{CliError, CliResult};
use anyhow::Context;
use plaquemap_core::dataset::map_to_ccta3;
use plaquemap_core::metrics::{agreement_report, BinarizationRule};
use plaquemap_core::volio::LabelSeq;
use std::path::PathBuf;

#[derive(clap::Args)]
pub struct Args {
    /// First label CSV (rows of the confusion matrix). Fine-taxonomy
    /// input is mapped onto the coarse classes first.
    #[arg(long)]
    pub a: PathBuf,
    /// Second label CSV (columns of the confusion matrix).
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: Args) -> CliResult {
    let mut ctx = RunContext::new("kappa", None, serde_json::Value::Null);
    ctx.record_input("a", &args.a)?;
    ctx.record_input("b", &args.b)?;

    let a = LabelSeq::load(&args.a)
        .context("loading first label sequence")
        .map_err(CliError::Runtime)?;
    let b = LabelSeq::load(&args.b)
        .context("loading second label sequence")
        .map_err(CliError::Runtime)?;
    let mut report = agreement_report(
        &map_to_ccta3(&a),
        &map_to_ccta3(&b),
        &BinarizationRule::default(),
    )
    .context("computing agreement")
    .map_err(CliError::Runtime)?;
    report.notes.push(KAPPA_BENCHMARK_NOTE.to_string());

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(CliError::Runtime)?;
    std::fs::write(
        args.out.join("agreement.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .context("writing agreement.json")
    .map_err(CliError::Runtime)?;
    std::fs::write(args.out.join("agreement.csv"), report.to_csv())
        .context("writing agreement.csv")
        .map_err(CliError::Runtime)?;
    println!("kappa: {:.4} (binary: {:.4})", report.kappa, report.binary_kappa);

    ctx.record_output("agreement.json");
    ctx.record_output("agreement.csv");
    ctx.finish(&args.out)?;
    Ok(())
}
