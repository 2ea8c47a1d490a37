use super::load_config;
use crate::manifest::RunContext;
use crate::{config_err, CliResult};
use anyhow::Context;
use plaquemap_core::synth::{gen_dataset, DatasetMode, GeneratorConfig};
use std::path::PathBuf;

#[derive(clap::Args)]
pub struct Args {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Generator config JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub patients: Option<usize>,
    /// standard | context
    #[arg(long)]
    pub mode: Option<String>,
}

pub fn run(args: Args) -> CliResult {
    let mut cfg: GeneratorConfig = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(patients) = args.patients {
        cfg.patients = patients;
    }
    if let Some(mode) = &args.mode {
        cfg.mode = match mode.as_str() {
            "standard" => DatasetMode::Standard,
            "context" => DatasetMode::ContextDependent,
            other => return Err(config_err(format!("unknown mode {other:?}"))),
        };
    }
    if cfg.patients == 0 {
        return Err(config_err("patients must be at least 1"));
    }

    let mut ctx = RunContext::new(
        "synth",
        Some(cfg.seed),
        serde_json::to_value(&cfg).expect("config serializes"),
    );
    if let Some(p) = &args.config {
        ctx.record_input("config", p)?;
    }
    gen_dataset(&cfg, &args.out.join("phantoms"))
        .context("generating phantom dataset")
        .map_err(crate::CliError::Runtime)?;
    ctx.record_output("phantoms");
    ctx.finish(&args.out)?;
    Ok(())
}
