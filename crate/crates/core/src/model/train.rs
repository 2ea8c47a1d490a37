//! Training loop: shuffled mini-batches, Adam with a cosine schedule,
//! per-epoch train/validation statistics.

use super::{BatchInput, ModelConfig, ModelError, SequenceClassifier};
use crate::dataset::SampleSeq;
use crate::metrics;
use crate::nn::{cosine_lr, AdamState, Graph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Optimization protocol. Defaults are desk-scale; the reference protocol
/// uses 2000 epochs, batches of 8, five folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_sequences: usize,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_sequences: 8,
            lr_peak: 1e-3,
            lr_floor: 1e-6,
            folds: 5,
            seed: 0,
        }
    }
}

/// One row of the per-epoch metric history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub final_train_loss: f64,
}

impl TrainReport {
    /// Metric history as CSV, one row per epoch.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_loss,val_accuracy\n");
        for s in &self.history {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.epoch,
                s.lr,
                s.train_loss,
                s.val_loss.map_or(String::new(), |v| v.to_string()),
                s.val_accuracy.map_or(String::new(), |v| v.to_string()),
            ));
        }
        out
    }
}

fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    // splitmix-style scramble, stable across platforms
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Train on `train`, evaluating on `val` each epoch. Deterministic given
/// the config seeds. A non-finite loss aborts with the checkpoint from the
/// last completed epoch.
pub fn train_fold(
    train: &[SampleSeq],
    val: &[SampleSeq],
    mc: &ModelConfig,
    tc: &TrainConfig,
) -> Result<(SequenceClassifier, TrainReport), ModelError> {
    if train.is_empty() {
        return Err(ModelError::BadConfig("empty training set".to_string()));
    }
    let train_ids: BTreeSet<&str> = train.iter().map(|s| s.patient_id.as_str()).collect();
    let leaked: Vec<String> = val
        .iter()
        .filter(|s| train_ids.contains(s.patient_id.as_str()))
        .map(|s| s.patient_id.clone())
        .collect();
    if !leaked.is_empty() {
        return Err(ModelError::LeakedPatients(leaked));
    }

    let mut model = SequenceClassifier::new_seeded(mc.clone())?;
    let sizes: Vec<usize> = model.params.iter().map(|p| p.tensor.numel()).collect();
    let mut adam = AdamState::new(&sizes);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, 0xA5A5, 0));

    let mut history = Vec::with_capacity(tc.epochs);
    let mut last_good = model.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..tc.epochs {
        let lr = cosine_lr(epoch, tc.epochs, tc.lr_peak, tc.lr_floor)?;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(tc.batch_sequences.max(1)).enumerate() {
            let refs: Vec<&SampleSeq> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = BatchInput::from_sequences(&refs, mc)?;
            let mut g = Graph::new(mix_seed(tc.seed, epoch as u64 + 1, step as u64), true);
            let leaves = model.leaves(&mut g);
            let logits = model.forward(&mut g, &leaves, &batch)?;
            let loss = g.cross_entropy(logits, &batch.labels, &batch.mask)?;
            let loss_value = g.value(loss)[0];
            if !loss_value.is_finite() {
                return Err(ModelError::DivergenceDetected {
                    epoch,
                    last_checkpoint: Box::new(last_good),
                });
            }
            g.backward(loss)?;
            let grads: Vec<Vec<f64>> = leaves.iter().map(|&id| g.grad(id).to_vec()).collect();
            let mut params: Vec<Vec<f64>> = model
                .params
                .iter()
                .map(|p| p.tensor.data().to_vec())
                .collect();
            adam.step(&mut params, &grads, lr);
            for (p, new) in model.params.iter_mut().zip(params) {
                p.tensor.data_mut().copy_from_slice(&new);
            }
            epoch_loss += loss_value;
            batches += 1;
        }
        let train_loss = epoch_loss / batches.max(1) as f64;

        let (val_loss, val_accuracy) = if val.is_empty() {
            (None, None)
        } else {
            let stats = evaluate(&model, val)?;
            (Some(stats.0), Some(stats.1))
        };
        history.push(EpochStats {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_accuracy,
        });
        last_good = model.clone();
    }

    let final_train_loss = history.last().map(|s| s.train_loss).unwrap_or(f64::NAN);
    Ok((
        model,
        TrainReport {
            history,
            final_train_loss,
        },
    ))
}

/// Mean cross-entropy and per-window accuracy of a model on a set of
/// sequences (eval mode).
pub fn evaluate(
    model: &SequenceClassifier,
    seqs: &[SampleSeq],
) -> Result<(f64, f64), ModelError> {
    let probs = model.predict(seqs)?;
    let mut loss = 0.0;
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    let mut count = 0usize;
    for (s, seq_probs) in seqs.iter().zip(&probs) {
        for (pos, row) in seq_probs.iter().enumerate() {
            let label = s.labels[pos] as usize;
            loss -= row[label].max(1e-300).ln();
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
                .map(|(i, _)| i as u8)
                .unwrap_or(0);
            preds.push(arg);
            truths.push(s.labels[pos]);
            count += 1;
        }
    }
    let acc = metrics::accuracy(&preds, &truths)
        .map_err(|e| ModelError::BadConfig(e.to_string()))?;
    Ok((loss / count.max(1) as f64, acc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            window_slices: 4,
            window_size: 5,
            d_model: 8,
            heads: 2,
            encoder_layers: 1,
            cnn_channels: vec![2, 4],
            classes: 3,
            dropout: 0.0,
            positional_encoding: true,
            use_transformer: true,
            seed: 11,
        }
    }

    /// Three synthetic classes with distinct intensity levels.
    fn labeled_sequence(id: &str, seed: u64, len: usize) -> SampleSeq {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let window_len = 4 * 5 * 5;
        let labels: Vec<u8> = (0..len).map(|_| rng.gen_range(0..3u8)).collect();
        let volumes = labels
            .iter()
            .map(|&c| {
                (0..window_len)
                    .map(|_| c as f32 * 0.3 + rng.gen_range(0.0..0.08))
                    .collect()
            })
            .collect();
        SampleSeq {
            patient_id: id.to_string(),
            volumes,
            labels,
            window_slices: 4,
            window_size: 5,
        }
    }

    #[test]
    fn overfits_two_sequences() {
        let train = vec![
            labeled_sequence("p0", 5, 4),
            labeled_sequence("p1", 9, 3),
        ];
        let tc = TrainConfig {
            epochs: 300,
            batch_sequences: 2,
            lr_peak: 5e-3,
            lr_floor: 1e-5,
            folds: 2,
            seed: 3,
        };
        let (model, report) = train_fold(&train, &[], &toy_config(), &tc).unwrap();
        assert!(
            report.final_train_loss < 0.05,
            "final loss {}",
            report.final_train_loss
        );
        // Memorized labels.
        let probs = model.predict(&train).unwrap();
        for (s, sp) in train.iter().zip(&probs) {
            for (pos, row) in sp.iter().enumerate() {
                let arg = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(arg as u8, s.labels[pos]);
            }
        }
    }

    #[test]
    fn identical_seeds_identical_histories() {
        let train = vec![
            labeled_sequence("p0", 5, 3),
            labeled_sequence("p1", 9, 4),
            labeled_sequence("p2", 13, 2),
        ];
        let val = vec![labeled_sequence("p3", 21, 3)];
        let mut mc = toy_config();
        mc.dropout = 0.1;
        let tc = TrainConfig {
            epochs: 5,
            batch_sequences: 2,
            lr_peak: 1e-3,
            lr_floor: 1e-6,
            folds: 2,
            seed: 7,
        };
        let (_, a) = train_fold(&train, &val, &mc, &tc).unwrap();
        let (_, b) = train_fold(&train, &val, &mc, &tc).unwrap();
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn leaked_patients_rejected() {
        let train = vec![labeled_sequence("p0", 5, 3)];
        let val = vec![labeled_sequence("p0", 5, 3)];
        assert!(matches!(
            train_fold(&train, &val, &toy_config(), &TrainConfig::default()),
            Err(ModelError::LeakedPatients(_))
        ));
    }

    /// No spurious leakage: shuffled labels cannot be learned, so the loss
    /// stays near ln(C) on a held-out set... and even on train the loss
    /// floor is majority-class entropy. We check the validation loss.
    #[test]
    fn shuffled_labels_stay_near_chance() {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut train: Vec<SampleSeq> = (0..4)
            .map(|i| labeled_sequence(&format!("p{i}"), 100 + i as u64, 5))
            .collect();
        // Shuffle labels across all windows, destroying the signal.
        for s in &mut train {
            s.labels.shuffle(&mut rng);
        }
        let val: Vec<SampleSeq> = (0..2)
            .map(|i| {
                let mut s = labeled_sequence(&format!("q{i}"), 200 + i as u64, 5);
                s.labels.shuffle(&mut rng);
                s
            })
            .collect();
        let tc = TrainConfig {
            epochs: 40,
            batch_sequences: 4,
            lr_peak: 1e-3,
            lr_floor: 1e-6,
            folds: 2,
            seed: 1,
        };
        let (_, report) = train_fold(&train, &val, &toy_config(), &tc).unwrap();
        let final_val = report.history.last().unwrap().val_loss.unwrap();
        let chance = 3.0f64.ln();
        assert!(
            final_val >= 0.9 * chance,
            "val loss {final_val} dropped below 0.9·ln C = {}",
            0.9 * chance
        );
    }
}
