//! Run manifests: every subcommand emits one `manifest.json` capturing the
//! config snapshot, input hashes, and output paths, plus a sibling
//! `timing.json`. The manifest is fully deterministic for a given seed and
//! inputs; wall time lives in the timing file so reruns stay byte-identical.

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

pub struct RunContext {
    manifest: RunManifest,
    started: Instant,
}

impl RunContext {
    pub fn new(subcommand: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                config,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
            },
            started: Instant::now(),
        }
    }

    /// Hash a file or directory tree into the input table.
    pub fn record_input(&mut self, label: &str, path: &Path) -> Result<()> {
        let digest = hash_path(path)
            .with_context(|| format!("hashing input {}", path.display()))?;
        self.manifest.inputs.insert(label.to_string(), digest);
        Ok(())
    }

    pub fn record_output(&mut self, relative: impl Into<String>) {
        self.manifest.outputs.push(relative.into());
    }

    /// Write `manifest.json` + `timing.json` under `out_dir`.
    pub fn finish(mut self, out_dir: &Path) -> Result<()> {
        self.manifest.outputs.sort();
        self.manifest.outputs.dedup();
        fs::create_dir_all(out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;
        let manifest_path = out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&manifest_path, text)
            .with_context(|| format!("writing {}", manifest_path.display()))?;
        let timing = serde_json::json!({
            "wall_ms": self.started.elapsed().as_millis() as u64,
        });
        let timing_path = out_dir.join("timing.json");
        fs::write(&timing_path, serde_json::to_string_pretty(&timing)?)
            .with_context(|| format!("writing {}", timing_path.display()))?;
        Ok(())
    }
}

/// SHA-256 of a file, or of a directory tree (sorted relative paths and
/// their file hashes).
pub fn hash_path(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        for rel in files {
            hasher.update(rel.as_bytes());
            let bytes = fs::read(path.join(&rel))?;
            hasher.update(Sha256::digest(&bytes));
        }
    } else {
        let bytes = fs::read(path)
            .with_context(|| format!("reading {}", path.display()))?;
        hasher.update(&bytes);
    }
    Ok(hex_string(&hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for entry in entries {
        if entry.is_dir() {
            collect_files(root, &entry, out)?;
        } else {
            let rel = entry
                .strip_prefix(root)
                .expect("entry under root")
                .to_string_lossy()
                .into_owned();
            out.push(rel);
        }
    }
    Ok(())
}

fn hex_string(digest: &[u8]) -> String {
    let mut s = String::with_capacity(digest.len() * 2);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
