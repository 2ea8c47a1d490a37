//! Model parameters, forward pass, and inference.

use super::{ModelConfig, ModelError};
use crate::dataset::SampleSeq;
use crate::nn::{Graph, NodeId, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// A batch of sequences padded to a common length.
pub struct BatchInput {
    /// [batch, padded_len, n·d·d] window voxels, row-major.
    pub windows: Vec<f64>,
    /// true = real window, per (batch, position).
    pub mask: Vec<bool>,
    /// window labels, 0 at padded positions.
    pub labels: Vec<usize>,
    pub batch: usize,
    pub padded_len: usize,
}

impl BatchInput {
    /// Assemble sequences into one padded batch.
    pub fn from_sequences(seqs: &[&SampleSeq], cfg: &ModelConfig) -> Result<Self, ModelError> {
        let window_len = cfg.window_slices * cfg.window_size * cfg.window_size;
        let mut padded_len = 0;
        for s in seqs {
            if s.is_empty() {
                return Err(ModelError::EmptySequence {
                    patient_id: s.patient_id.clone(),
                });
            }
            for w in &s.volumes {
                if w.len() != window_len {
                    return Err(ModelError::WindowShape {
                        got: w.len(),
                        n: cfg.window_slices,
                        d: cfg.window_size,
                    });
                }
            }
            padded_len = padded_len.max(s.len());
        }
        let batch = seqs.len();
        let mut windows = vec![0.0f64; batch * padded_len * window_len];
        let mut mask = vec![false; batch * padded_len];
        let mut labels = vec![0usize; batch * padded_len];
        for (b, s) in seqs.iter().enumerate() {
            for (l, w) in s.volumes.iter().enumerate() {
                let base = (b * padded_len + l) * window_len;
                for (dst, &src) in windows[base..base + window_len].iter_mut().zip(w) {
                    *dst = src as f64;
                }
                mask[b * padded_len + l] = true;
                let label = s.labels[l];
                if label as usize >= cfg.classes {
                    return Err(ModelError::BadLabel {
                        label,
                        classes: cfg.classes,
                    });
                }
                labels[b * padded_len + l] = label as usize;
            }
        }
        Ok(Self {
            windows,
            mask,
            labels,
            batch,
            padded_len,
        })
    }
}

/// The classifier: a per-window 3D CNN embedding, an optional Transformer
/// encoder over each sequence, and a per-position linear head.
#[derive(Debug, Clone)]
pub struct SequenceClassifier {
    pub(crate) cfg: ModelConfig,
    pub(crate) params: Vec<Param>,
}

impl SequenceClassifier {
    /// Seeded initialization: weights and biases uniform in ±1/√fan_in,
    /// layer-norm affine at identity.
    pub fn new_seeded(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Vec::new();
        let uniform = |shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(shape, data).expect("sized data")
        };

        let mut prev = 1usize;
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (i, &ch) in cfg.cnn_channels.iter().enumerate() {
            let fan_in = prev * 27;
            tensors.push((
                format!("conv{i}.weight"),
                uniform(vec![ch, prev, 3, 3, 3], fan_in, &mut rng),
            ));
            tensors.push((format!("conv{i}.bias"), uniform(vec![ch], fan_in, &mut rng)));
            prev = ch;
        }
        let flat = cfg.flatten_width();
        tensors.push((
            "embed.weight".to_string(),
            uniform(vec![flat, cfg.d_model], flat, &mut rng),
        ));
        tensors.push((
            "embed.bias".to_string(),
            uniform(vec![cfg.d_model], flat, &mut rng),
        ));
        if cfg.use_transformer {
            let dm = cfg.d_model;
            let ff = 4 * dm;
            for l in 0..cfg.encoder_layers {
                for (part, rows, cols, fan_in) in [
                    ("attn.q", dm, dm, dm),
                    ("attn.k", dm, dm, dm),
                    ("attn.v", dm, dm, dm),
                    ("attn.out", dm, dm, dm),
                    ("ff.expand", dm, ff, dm),
                    ("ff.project", ff, dm, ff),
                ] {
                    tensors.push((
                        format!("enc{l}.{part}.weight"),
                        uniform(vec![rows, cols], fan_in, &mut rng),
                    ));
                    tensors.push((
                        format!("enc{l}.{part}.bias"),
                        uniform(vec![cols], fan_in, &mut rng),
                    ));
                }
                for ln in ["ln1", "ln2"] {
                    tensors.push((
                        format!("enc{l}.{ln}.gamma"),
                        Tensor::new(vec![dm], vec![1.0; dm]).expect("sized"),
                    ));
                    tensors.push((
                        format!("enc{l}.{ln}.beta"),
                        Tensor::zeros(vec![dm]),
                    ));
                }
            }
            tensors.push((
                "final_ln.gamma".to_string(),
                Tensor::new(vec![dm], vec![1.0; dm]).expect("sized"),
            ));
            tensors.push(("final_ln.beta".to_string(), Tensor::zeros(vec![dm])));
        }
        tensors.push((
            "head.weight".to_string(),
            uniform(vec![cfg.d_model, cfg.classes], cfg.d_model, &mut rng),
        ));
        tensors.push((
            "head.bias".to_string(),
            uniform(vec![cfg.classes], cfg.d_model, &mut rng),
        ));

        params.extend(
            tensors
                .into_iter()
                .map(|(name, tensor)| Param { name, tensor }),
        );
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn param_data(&self, index: usize) -> &[f64] {
        self.params[index].tensor.data()
    }

    /// Mutable access to one parameter buffer (shape is fixed); used by
    /// external gradient checks and tests.
    pub fn param_data_mut(&mut self, index: usize) -> &mut [f64] {
        self.params[index].tensor.data_mut()
    }

    pub(crate) fn param_index(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Insert all parameters as grad-requiring leaves, in order.
    pub fn leaves(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| g.leaf(p.tensor.clone(), true))
            .collect()
    }

    /// Forward to per-position logits [batch·padded_len, classes].
    pub fn forward(
        &self,
        g: &mut Graph,
        leaves: &[NodeId],
        batch: &BatchInput,
    ) -> Result<NodeId, ModelError> {
        let cfg = &self.cfg;
        let (b, l) = (batch.batch, batch.padded_len);
        let (n, d) = (cfg.window_slices, cfg.window_size);
        let x = g.leaf(
            Tensor::new(vec![b * l, 1, n, d, d], batch.windows.clone())
                .map_err(ModelError::Nn)?,
            false,
        );
        let features = self.phi(g, leaves, x)?;
        let logits = if cfg.use_transformer {
            self.sigma(g, leaves, features, batch)?
        } else {
            let h = g.dropout(features, cfg.dropout);
            self.linear(g, leaves, h, "head")?
        };
        Ok(logits)
    }

    /// Window embedding: [conv3d → relu → maxpool]× then flatten and
    /// project to d_model. Weight sharing across windows comes free from
    /// batching them together.
    fn phi(&self, g: &mut Graph, leaves: &[NodeId], x: NodeId) -> Result<NodeId, ModelError> {
        let mut h = x;
        for i in 0..self.cfg.cnn_channels.len() {
            let w = leaves[self.param_index(&format!("conv{i}.weight"))];
            let b = leaves[self.param_index(&format!("conv{i}.bias"))];
            h = g.conv3d(h, w, b)?;
            h = g.relu(h);
            h = g.maxpool3d(h)?;
        }
        let rows = g.shape(h)[0];
        let flat = self.cfg.flatten_width();
        h = g.reshape(h, vec![rows, flat])?;
        self.linear(g, leaves, h, "embed")
    }

    fn linear(
        &self,
        g: &mut Graph,
        leaves: &[NodeId],
        x: NodeId,
        name: &str,
    ) -> Result<NodeId, ModelError> {
        let w = leaves[self.param_index(&format!("{name}.weight"))];
        let b = leaves[self.param_index(&format!("{name}.bias"))];
        let h = g.matmul(x, w)?;
        Ok(g.add_bias(h, b)?)
    }

    /// Encoder over the window sequence: positional encoding, pre-norm
    /// attention and feed-forward blocks with residuals, final norm, head.
    fn sigma(
        &self,
        g: &mut Graph,
        leaves: &[NodeId],
        features: NodeId,
        batch: &BatchInput,
    ) -> Result<NodeId, ModelError> {
        let cfg = &self.cfg;
        let (b, l, dm) = (batch.batch, batch.padded_len, cfg.d_model);
        let mut h = g.reshape(features, vec![b, l, dm])?;
        if cfg.positional_encoding {
            let pe = g.leaf(positional_encoding(b, l, dm), false);
            h = g.add(h, pe)?;
        }
        let attn_mask = g.leaf(key_mask_tensor(&batch.mask, b, cfg.heads), false);
        for layer in 0..cfg.encoder_layers {
            h = self.encoder_block(g, leaves, h, attn_mask, layer, batch)?;
        }
        let gamma = leaves[self.param_index("final_ln.gamma")];
        let beta = leaves[self.param_index("final_ln.beta")];
        h = g.layer_norm(h, gamma, beta, LN_EPS)?;
        let h = g.reshape(h, vec![b * l, dm])?;
        let h = g.dropout(h, cfg.dropout);
        self.linear(g, leaves, h, "head")
    }

    fn encoder_block(
        &self,
        g: &mut Graph,
        leaves: &[NodeId],
        x: NodeId,
        attn_mask: NodeId,
        layer: usize,
        batch: &BatchInput,
    ) -> Result<NodeId, ModelError> {
        let cfg = &self.cfg;
        let (b, l, dm) = (batch.batch, batch.padded_len, cfg.d_model);
        let heads = cfg.heads;
        let dh = dm / heads;

        // Pre-norm attention with residual.
        let g1 = leaves[self.param_index(&format!("enc{layer}.ln1.gamma"))];
        let b1 = leaves[self.param_index(&format!("enc{layer}.ln1.beta"))];
        let normed = g.layer_norm(x, g1, b1, LN_EPS)?;
        let flat = g.reshape(normed, vec![b * l, dm])?;
        let q = self.linear(g, leaves, flat, &format!("enc{layer}.attn.q"))?;
        let k = self.linear(g, leaves, flat, &format!("enc{layer}.attn.k"))?;
        let v = self.linear(g, leaves, flat, &format!("enc{layer}.attn.v"))?;
        let split = |g: &mut Graph, t: NodeId| -> Result<NodeId, ModelError> {
            let t = g.reshape(t, vec![b, l, heads, dh])?;
            Ok(g.permute(t, vec![0, 2, 1, 3])?) // [b, heads, l, dh]
        };
        let q = split(g, q)?;
        let k = split(g, k)?;
        let v = split(g, v)?;
        let kt = g.permute(k, vec![0, 1, 3, 2])?; // [b, heads, dh, l]
        let scores = g.matmul(q, kt)?; // [b, heads, l, l]
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = g.add(scores, attn_mask)?;
        let attn = g.softmax_last_dim(scores)?;
        let attn = g.dropout(attn, cfg.dropout);
        let ctx = g.matmul(attn, v)?; // [b, heads, l, dh]
        let ctx = g.permute(ctx, vec![0, 2, 1, 3])?; // [b, l, heads, dh]
        let ctx = g.reshape(ctx, vec![b * l, dm])?;
        let proj = self.linear(g, leaves, ctx, &format!("enc{layer}.attn.out"))?;
        let proj = g.dropout(proj, cfg.dropout);
        let proj = g.reshape(proj, vec![b, l, dm])?;
        let x = g.add(x, proj)?;

        // Pre-norm feed-forward with residual.
        let g2 = leaves[self.param_index(&format!("enc{layer}.ln2.gamma"))];
        let b2 = leaves[self.param_index(&format!("enc{layer}.ln2.beta"))];
        let normed = g.layer_norm(x, g2, b2, LN_EPS)?;
        let flat = g.reshape(normed, vec![b * l, dm])?;
        let h = self.linear(g, leaves, flat, &format!("enc{layer}.ff.expand"))?;
        let h = g.relu(h);
        let h = g.dropout(h, cfg.dropout);
        let h = self.linear(g, leaves, h, &format!("enc{layer}.ff.project"))?;
        let h = g.reshape(h, vec![b, l, dm])?;
        Ok(g.add(x, h)?)
    }

    /// Per-position class probabilities for each sequence, padding
    /// stripped. Runs in eval mode (no dropout).
    pub fn predict(&self, seqs: &[SampleSeq]) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
        let mut out = Vec::with_capacity(seqs.len());
        // Batch a few sequences at a time to bound padding waste.
        for chunk in seqs.chunks(8) {
            let refs: Vec<&SampleSeq> = chunk.iter().collect();
            let batch = BatchInput::from_sequences(&refs, &self.cfg)?;
            let mut g = Graph::new(0, false);
            let leaves = self.leaves(&mut g);
            let logits = self.forward(&mut g, &leaves, &batch)?;
            let probs = g.softmax_last_dim(logits)?;
            let values = g.value(probs);
            let c = self.cfg.classes;
            for (bi, s) in chunk.iter().enumerate() {
                let mut seq_probs = Vec::with_capacity(s.len());
                for pos in 0..s.len() {
                    let base = (bi * batch.padded_len + pos) * c;
                    seq_probs.push(values[base..base + c].to_vec());
                }
                out.push(seq_probs);
            }
        }
        Ok(out)
    }
}

/// Sinusoidal positional encoding tiled over the batch: [b, l, dm].
fn positional_encoding(b: usize, l: usize, dm: usize) -> Tensor {
    let mut row = vec![0.0f64; l * dm];
    for pos in 0..l {
        for i in 0..dm / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dm as f64);
            row[pos * dm + 2 * i] = (pos as f64 * rate).sin();
            if 2 * i + 1 < dm {
                row[pos * dm + 2 * i + 1] = (pos as f64 * rate).cos();
            }
        }
    }
    let mut data = Vec::with_capacity(b * l * dm);
    for _ in 0..b {
        data.extend_from_slice(&row);
    }
    Tensor::new(vec![b, l, dm], data).expect("sized")
}

/// Additive attention mask [b, heads, l, l]: 0 on real keys, a large
/// negative on padded keys so their weight underflows to zero.
fn key_mask_tensor(mask: &[bool], b: usize, heads: usize) -> Tensor {
    // mask is laid out [b, l]
    let l = mask.len() / b;
    let mut data = vec![0.0f64; b * heads * l * l];
    for bi in 0..b {
        for h in 0..heads {
            for q in 0..l {
                let base = ((bi * heads + h) * l + q) * l;
                for kk in 0..l {
                    if !mask[bi * l + kk] {
                        data[base + kk] = MASK_NEG;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, heads, l, l], data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_config() -> ModelConfig {
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

    pub(crate) fn toy_sequence(id: &str, len: usize, fill: impl Fn(usize, usize) -> f32) -> SampleSeq {
        let window_len = 4 * 5 * 5;
        SampleSeq {
            patient_id: id.to_string(),
            volumes: (0..len)
                .map(|w| (0..window_len).map(|i| fill(w, i)).collect())
                .collect(),
            labels: (0..len).map(|w| (w % 3) as u8).collect(),
            window_slices: 4,
            window_size: 5,
        }
    }

    #[test]
    fn identical_windows_embed_identically() {
        let cfg = toy_config();
        let model = SequenceClassifier::new_seeded(cfg.clone()).unwrap();
        let seq = toy_sequence("p0", 3, |_, i| ((i * 13) % 7) as f32 / 7.0);
        let refs = [&seq];
        let batch = BatchInput::from_sequences(&refs, &cfg).unwrap();
        let mut g = Graph::new(0, false);
        let leaves = model.leaves(&mut g);
        let x = g
            .leaf(
                Tensor::new(vec![3, 1, 4, 5, 5], batch.windows.clone()).unwrap(),
                false,
            );
        let feats = model.phi(&mut g, &leaves, x).unwrap();
        let v = g.value(feats);
        let dm = cfg.d_model;
        assert_eq!(v.len(), 3 * dm);
        assert_eq!(&v[..dm], &v[dm..2 * dm]);
        assert_eq!(&v[..dm], &v[2 * dm..]);
    }

    #[test]
    fn logit_shape_contract() {
        let cfg = toy_config();
        let model = SequenceClassifier::new_seeded(cfg.clone()).unwrap();
        let s0 = toy_sequence("p0", 5, |w, i| (w * 100 + i) as f32 / 1e4);
        let s1 = toy_sequence("p1", 2, |w, i| (w * 31 + i * 3) as f32 / 1e4);
        let refs = [&s0, &s1];
        let batch = BatchInput::from_sequences(&refs, &cfg).unwrap();
        let mut g = Graph::new(0, false);
        let leaves = model.leaves(&mut g);
        let logits = model.forward(&mut g, &leaves, &batch).unwrap();
        assert_eq!(g.shape(logits), &[2 * 5, 3]);
        assert!(g.value(logits).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn window_slice_variants_accepted() {
        for n in [6usize, 9, 12] {
            let cfg = ModelConfig {
                window_slices: n,
                window_size: 21,
                d_model: 16,
                heads: 2,
                encoder_layers: 1,
                cnn_channels: vec![2, 4],
                classes: 6,
                dropout: 0.0,
                seed: 1,
                ..ModelConfig::default()
            };
            cfg.validate().unwrap();
            let model = SequenceClassifier::new_seeded(cfg.clone()).unwrap();
            let window_len = n * 21 * 21;
            let seq = SampleSeq {
                patient_id: "p".into(),
                volumes: vec![(0..window_len).map(|i| (i % 9) as f32).collect()],
                labels: vec![0],
                window_slices: n,
                window_size: 21,
            };
            let probs = model.predict(std::slice::from_ref(&seq)).unwrap();
            assert_eq!(probs[0][0].len(), 6);
        }
    }

    #[test]
    fn predict_rows_sum_to_one_and_reproduce() {
        let cfg = toy_config();
        let model = SequenceClassifier::new_seeded(cfg).unwrap();
        let seq = toy_sequence("p0", 4, |w, i| ((w * 97 + i * 11) % 23) as f32 / 23.0);
        let a = model.predict(std::slice::from_ref(&seq)).unwrap();
        let b = model.predict(std::slice::from_ref(&seq)).unwrap();
        assert_eq!(a, b);
        for row in &a[0] {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_window_sequence_finite() {
        let cfg = toy_config();
        let model = SequenceClassifier::new_seeded(cfg).unwrap();
        let seq = toy_sequence("p0", 1, |_, i| (i % 5) as f32);
        let probs = model.predict(std::slice::from_ref(&seq)).unwrap();
        assert_eq!(probs[0].len(), 1);
        assert!(probs[0][0].iter().all(|p| p.is_finite()));
    }

    #[test]
    fn empty_sequence_rejected() {
        let cfg = toy_config();
        let seq = SampleSeq {
            patient_id: "void".into(),
            volumes: vec![],
            labels: vec![],
            window_slices: 4,
            window_size: 5,
        };
        let refs = [&seq];
        assert!(matches!(
            BatchInput::from_sequences(&refs, &cfg),
            Err(ModelError::EmptySequence { .. })
        ));
    }

    /// With positional encoding off aggression, permuting positions permutes
    /// logits identically (fixed weights, no positional signal).
    #[test]
    fn permutation_equivariance_without_positions() {
        let mut cfg = toy_config();
        cfg.positional_encoding = false;
        let model = SequenceClassifier::new_seeded(cfg.clone()).unwrap();
        let seq = toy_sequence("p0", 4, |w, i| ((w * 53 + i * 7) % 19) as f32 / 19.0);
        let probs = model.predict(std::slice::from_ref(&seq)).unwrap();
        // Reverse the windows.
        let rev = SampleSeq {
            patient_id: "p0".into(),
            volumes: seq.volumes.iter().rev().cloned().collect(),
            labels: seq.labels.iter().rev().copied().collect(),
            window_slices: 4,
            window_size: 5,
        };
        let probs_rev = model.predict(std::slice::from_ref(&rev)).unwrap();
        for pos in 0..4 {
            for c in 0..3 {
                assert!(
                    (probs[0][pos][c] - probs_rev[0][3 - pos][c]).abs() < 1e-9,
                    "position {pos} class {c}"
                );
            }
        }
    }

    /// Adding a padded position to a batch must not move unmasked logits.
    #[test]
    fn batch_padding_neutrality() {
        let cfg = toy_config();
        let model = SequenceClassifier::new_seeded(cfg.clone()).unwrap();
        let s0 = toy_sequence("p0", 3, |w, i| ((w * 41 + i * 5) % 17) as f32 / 17.0);
        let s1 = toy_sequence("p1", 5, |w, i| ((w * 13 + i * 3) % 29) as f32 / 29.0);
        // Alone: padded to its own length.
        let alone = model.predict(std::slice::from_ref(&s0)).unwrap();
        // Batched with a longer sequence: s0 gains two padded positions.
        let both = model.predict(&[s0.clone(), s1]).unwrap();
        for pos in 0..3 {
            for c in 0..3 {
                assert!(
                    (alone[0][pos][c] - both[0][pos][c]).abs() < 1e-8,
                    "padding moved logits at {pos}/{c}"
                );
            }
        }
    }
}
