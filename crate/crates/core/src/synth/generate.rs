//! Multi-patient dataset generation: randomized phantom specs, per-patient
//! bundles on disk, and the dataset manifest.

use super::{gen_phantom, PhantomBundle, PhantomSpec, PlaqueRun, SynthError, VesselPath};
use crate::volio::OctClass;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMode {
    /// Every class locally identifiable from its intensity signature.
    Standard,
    /// Stent walls render like fibrous tissue except for sparse flashes,
    /// so stent windows need sequence context to classify.
    ContextDependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub patients: usize,
    pub seed: u64,
    pub mode: DatasetMode,
    pub oct_thickness_mm: f64,
    pub mpr_thickness_mm: f64,
    pub ccta_spacing_mm: [f64; 3],
    pub noise_sigma: f64,
    pub vessel_length_range: (f64, f64),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            patients: 40,
            seed: 0,
            mode: DatasetMode::Standard,
            oct_thickness_mm: 0.2,
            mpr_thickness_mm: 0.5,
            ccta_spacing_mm: [0.45, 0.4, 0.4],
            noise_sigma: 4.0,
            vessel_length_range: (78.0, 95.0),
        }
    }
}

fn mix(seed: u64, idx: u64) -> u64 {
    let mut z = seed ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-patient phantom specs for a generator config. Every
/// patient carries all five plaque classes plus healthy gaps; sequence
/// lengths vary with the vessel length and run layout.
pub fn patient_specs(cfg: &GeneratorConfig) -> Vec<PhantomSpec> {
    (0..cfg.patients)
        .map(|i| {
            let seed = mix(cfg.seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let length = rng.gen_range(cfg.vessel_length_range.0..cfg.vessel_length_range.1);

            let path = match i % 3 {
                0 => VesselPath::Line,
                1 => VesselPath::Helix {
                    radius_mm: rng.gen_range(2.2..3.4),
                    pitch_mm: rng.gen_range(48.0..70.0),
                },
                _ => {
                    let mut control = vec![[0.0, 0.0, -10.0]];
                    let mut z = 0.0;
                    while z < length + 10.0 {
                        control.push([
                            rng.gen_range(-4.0..4.0),
                            rng.gen_range(-4.0..4.0),
                            z,
                        ]);
                        z += rng.gen_range(14.0..20.0);
                    }
                    control.push([0.0, 0.0, z + 10.0]);
                    VesselPath::Spline { control }
                }
            };

            // Standard mode: one run of each plaque class, shuffled. The
            // context variant narrows the palette to the ambiguous
            // stent/fibrous pair with long runs, so most windows belong to
            // one of the two confusable classes and classification hinges
            // on sequence context.
            let mut classes = match cfg.mode {
                DatasetMode::Standard => vec![
                    OctClass::Calcified,
                    OctClass::LipidRich,
                    OctClass::Fibrous,
                    OctClass::Thrombus,
                    OctClass::Stent,
                ],
                DatasetMode::ContextDependent => vec![
                    OctClass::Stent,
                    OctClass::Fibrous,
                    OctClass::Stent,
                    OctClass::Fibrous,
                ],
            };
            for k in (1..classes.len()).rev() {
                let j = rng.gen_range(0..=k);
                classes.swap(k, j);
            }
            let mut runs = Vec::new();
            let mut cursor = rng.gen_range(8.0..12.0);
            for &class in &classes {
                let len = match cfg.mode {
                    DatasetMode::Standard => rng.gen_range(5.0..9.0),
                    DatasetMode::ContextDependent => rng.gen_range(12.0..17.0),
                };
                if cursor + len > length - 6.0 {
                    break;
                }
                runs.push(PlaqueRun {
                    class,
                    start_mm: cursor,
                    end_mm: cursor + len,
                });
                cursor += len + rng.gen_range(3.0..6.0);
            }

            let first = runs.first().map(|r| r.start_mm).unwrap_or(10.0);
            let last = runs.last().map(|r| r.end_mm).unwrap_or(length - 10.0);
            let pullback = (
                (first - rng.gen_range(2.0..4.0)).max(1.0),
                (last + rng.gen_range(2.0..4.0)).min(length - 1.0),
            );
            let stretches: Vec<f64> = (0..4)
                .map(|_| rng.gen_range(0.25..0.65))
                .collect();

            PhantomSpec {
                seed,
                path,
                vessel_length_mm: length,
                lumen_radius_mm: rng.gen_range(1.4..1.9),
                runs,
                oct_thickness_mm: cfg.oct_thickness_mm,
                mpr_thickness_mm: cfg.mpr_thickness_mm,
                ccta_spacing_mm: cfg.ccta_spacing_mm,
                stretches,
                pullback_mm: pullback,
                noise_sigma: cfg.noise_sigma,
                ambiguous_stent: cfg.mode == DatasetMode::ContextDependent,
            }
        })
        .collect()
}

/// Dataset-level manifest written next to the per-patient bundles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: GeneratorConfig,
    pub patients: Vec<String>,
}

fn io_err(path: &Path, e: impl ToString) -> SynthError {
    SynthError::Internal(format!("{}: {}", path.display(), e.to_string()))
}

/// Write one phantom bundle into a patient directory.
pub fn write_bundle(dir: &Path, bundle: &PhantomBundle) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    bundle
        .ccta
        .save(&dir.join("ccta.json"))
        .map_err(|e| io_err(dir, e))?;
    bundle
        .centerline
        .save(&dir.join("centerline.csv"))
        .map_err(|e| io_err(dir, e))?;
    bundle
        .oct_labels
        .save(&dir.join("oct_labels.csv"))
        .map_err(|e| io_err(dir, e))?;
    bundle
        .references
        .save(&dir.join("references.csv"))
        .map_err(|e| io_err(dir, e))?;
    bundle
        .truth
        .mpr_labels
        .labels
        .save(&dir.join("truth_labels.csv"))
        .map_err(|e| io_err(dir, e))?;
    let truth_path = dir.join("truth.json");
    let text = serde_json::to_string_pretty(&bundle.truth).expect("truth serializes");
    fs::write(&truth_path, text).map_err(|e| io_err(&truth_path, e))?;
    Ok(())
}

/// Generate and write the whole dataset; returns the manifest.
pub fn gen_dataset(cfg: &GeneratorConfig, out_dir: &Path) -> Result<SynthManifest, SynthError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let specs = patient_specs(cfg);
    let mut patients = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let id = format!("p{i:03}");
        let bundle = gen_phantom(spec)?;
        write_bundle(&out_dir.join(&id), &bundle)?;
        patients.push(id);
    }
    let manifest = SynthManifest {
        config: cfg.clone(),
        patients,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}
