//! Checkpoint format: a JSON manifest (config, parameter names, shapes,
//! offsets, RNG seed) next to a raw little-endian float64 weight blob.

use super::classifier::Param;
use super::{ModelConfig, ModelError, SequenceClassifier};
use crate::nn::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config: ModelConfig,
    rng_seed: u64,
    weights_file: String,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the weight blob, in f64 units.
    offset: usize,
}

fn ck_err(path: &Path, reason: impl ToString) -> ModelError {
    ModelError::CheckpointIo {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

/// Write `model` under `dir` as `checkpoint.json` + `weights.f64`.
pub fn save_checkpoint(model: &SequenceClassifier, dir: &Path) -> Result<(), ModelError> {
    fs::create_dir_all(dir).map_err(|e| ck_err(dir, e))?;
    let mut entries = Vec::with_capacity(model.params.len());
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for p in &model.params {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset,
        });
        for v in p.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += p.tensor.numel();
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: model.cfg.clone(),
        rng_seed: model.cfg.seed,
        weights_file: "weights.f64".to_string(),
        params: entries,
    };
    let manifest_path = dir.join("checkpoint.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(|e| ck_err(&manifest_path, e))?;
    let weights_path = dir.join("weights.f64");
    fs::write(&weights_path, blob).map_err(|e| ck_err(&weights_path, e))?;
    Ok(())
}

/// Load a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<SequenceClassifier, ModelError> {
    let manifest_path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| ck_err(&manifest_path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| ck_err(&manifest_path, e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ModelError::IncompatibleCheckpoint(format!(
            "format version {} (supported: {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    manifest.config.validate()?;
    let weights_path = dir.join(&manifest.weights_file);
    let blob = fs::read(&weights_path).map_err(|e| ck_err(&weights_path, e))?;
    let total: usize = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if blob.len() != total * 8 {
        return Err(ModelError::IncompatibleCheckpoint(format!(
            "weight blob holds {} bytes, manifest expects {}",
            blob.len(),
            total * 8
        )));
    }
    let mut values = Vec::with_capacity(total);
    for chunk in blob.chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
    }
    let mut params = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let numel: usize = entry.shape.iter().product();
        if entry.offset + numel > values.len() {
            return Err(ModelError::IncompatibleCheckpoint(format!(
                "parameter {} overruns the weight blob",
                entry.name
            )));
        }
        let tensor = Tensor::new(
            entry.shape.clone(),
            values[entry.offset..entry.offset + numel].to_vec(),
        )
        .map_err(ModelError::Nn)?;
        params.push(Param {
            name: entry.name.clone(),
            tensor,
        });
    }
    // Cross-check the parameter set against a freshly built skeleton.
    let skeleton = SequenceClassifier::new_seeded(manifest.config.clone())?;
    if skeleton.params.len() != params.len()
        || skeleton
            .params
            .iter()
            .zip(&params)
            .any(|(a, b)| a.name != b.name || a.tensor.shape() != b.tensor.shape())
    {
        return Err(ModelError::IncompatibleCheckpoint(
            "parameter list does not match the declared config".to_string(),
        ));
    }
    Ok(SequenceClassifier {
        cfg: manifest.config,
        params,
    })
}
