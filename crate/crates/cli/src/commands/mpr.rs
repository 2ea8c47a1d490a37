use super::load_config;
use crate::manifest::RunContext;
use crate::{config_err, CliError, CliResult};
use anyhow::Context;
use plaquemap_core::mprrec::{reconstruct_mpr, MprConfig};
use plaquemap_core::volio::{Centerline, Volume3D};
use std::path::PathBuf;

#[derive(clap::Args)]
pub struct Args {
    /// CT volume header (JSON next to a raw blob).
    #[arg(long)]
    pub ccta: PathBuf,
    /// Centerline CSV.
    #[arg(long)]
    pub centerline: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reconstruction config JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub slice_thickness: Option<f64>,
    #[arg(long)]
    pub in_plane_spacing: Option<f64>,
    #[arg(long)]
    pub cross_section: Option<usize>,
    #[arg(long)]
    pub fill: Option<f64>,
}

pub fn run(args: Args) -> CliResult {
    let mut cfg: MprConfig = load_config(&args.config)?;
    if let Some(v) = args.slice_thickness {
        cfg.slice_thickness_mm = v;
    }
    if let Some(v) = args.in_plane_spacing {
        cfg.in_plane_spacing_mm = v;
    }
    if let Some(v) = args.cross_section {
        cfg.cross_section = v;
    }
    if let Some(v) = args.fill {
        cfg.fill_value = v;
    }
    if !(cfg.slice_thickness_mm > 0.0) || !(cfg.in_plane_spacing_mm > 0.0) {
        return Err(config_err("slice thickness and in-plane spacing must be positive"));
    }
    if cfg.cross_section % 2 == 0 || cfg.cross_section == 0 {
        return Err(config_err(format!(
            "cross-section {} must be odd so the centerline lies on the central pixel",
            cfg.cross_section
        )));
    }

    let mut ctx = RunContext::new(
        "mpr",
        None,
        serde_json::to_value(&cfg).expect("config serializes"),
    );
    ctx.record_input("ccta_header", &args.ccta)?;
    ctx.record_input("ccta_raw", &args.ccta.with_extension("raw"))?;
    ctx.record_input("centerline", &args.centerline)?;
    if let Some(p) = &args.config {
        ctx.record_input("config", p)?;
    }

    let vol = Volume3D::load(&args.ccta)
        .context("loading CT volume")
        .map_err(CliError::Runtime)?;
    let centerline = Centerline::load(&args.centerline)
        .context("loading centerline")
        .map_err(CliError::Runtime)?;
    let mpr = reconstruct_mpr(&vol, &centerline, &cfg)
        .context("reconstructing MPR")
        .map_err(CliError::Runtime)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(CliError::Runtime)?;
    mpr.save(&args.out.join("mpr.json"))
        .context("writing MPR volume")
        .map_err(CliError::Runtime)?;
    ctx.record_output("mpr.json");
    ctx.record_output("mpr.raw");
    ctx.finish(&args.out)?;
    Ok(())
}
