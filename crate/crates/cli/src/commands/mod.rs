pub mod align;
pub mod dataset;
pub mod eval;
pub mod kappa;
pub mod mpr;
pub mod pipeline;
pub mod synth;
pub mod train;

use crate::{config_err, CliError};
use serde::de::DeserializeOwned;
use std::path::{Path, PathBuf};

/// Load a JSON config file, or the type's defaults when no path is given.
pub fn load_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| config_err(format!("{}: {e}", p.display())))
        }
    }
}

/// Accept either an archive directory or its parent produced by `dataset`
/// (which nests the archive under `archive/` next to the run manifest).
pub fn resolve_archive(path: &Path) -> PathBuf {
    if path.join("archive").join("manifest.json").exists() {
        path.join("archive")
    } else {
        path.to_path_buf()
    }
}

/// Deterministic derivation of stage seeds from a master seed.
pub fn mix_seed(base: u64, stage: u64) -> u64 {
    let mut z = base ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
