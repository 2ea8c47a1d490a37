//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records operations in topological order as they execute;
//! [`Graph::backward`] walks the tape once in reverse. A graph instance is
//! single-owner for one forward/backward cycle; a second backward without
//! a fresh forward is a stale-graph error.

use super::{shape_err, NnError, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type NodeId = usize;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        batched: bool,
    },
    Conv3d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: usize,
    },
    MaxPool3d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Reshape(NodeId),
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        rstd: Vec<f64>,
        mean: Vec<f64>,
    },
    SoftmaxLastDim(NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<bool>,
        keep: f64,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(NodeId),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
    train: bool,
    consumed: bool,
}

impl Graph {
    /// `seed` drives dropout masks; `train` enables them.
    pub fn new(seed: u64, train: bool) -> Self {
        Self {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            train,
            consumed: false,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: Vec::new(),
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn value_tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id].shape.clone(), self.nodes[id].value.clone())
            .expect("node shapes are consistent")
    }

    /// Gradient of a node after [`backward`](Self::backward). Empty slice
    /// if no gradient reached it.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].grad
    }

    /// Insert an input or parameter.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        let (shape, data) = t.into_parts();
        self.push(shape, data, Op::Leaf, requires_grad)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        let value: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a].shape.clone(), value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        let value: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.nodes[a].shape.clone(), value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value: Vec<f64> = self.nodes[a].value.iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.nodes[a].shape.clone(), value, Op::Scale(a, c), rg)
    }

    /// x [..., n] + bias [n], broadcast over leading dims.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        let n = *self.nodes[x].shape.last().unwrap_or(&0);
        if self.nodes[bias].shape != [n] {
            return Err(shape_err(
                "add_bias",
                format!(
                    "bias {:?} does not match last dim of {:?}",
                    self.nodes[bias].shape, self.nodes[x].shape
                ),
            ));
        }
        let mut value = self.nodes[x].value.clone();
        for row in value.chunks_exact_mut(n) {
            for (v, b) in row.iter_mut().zip(&self.nodes[bias].value) {
                *v += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.nodes[x].shape.clone(), value, Op::AddBias(x, bias), rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value: Vec<f64> = self.nodes[x].value.iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(x);
        self.push(self.nodes[x].shape.clone(), value, Op::Relu(x), rg)
    }

    /// Matrix product. With a rank-2 rhs [k, n], the lhs [..., k] is used
    /// row-wise (a shared linear map). With equal leading dims, computes a
    /// batched [..., m, k] × [..., k, n] product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let ashape = self.nodes[a].shape.clone();
        let bshape = self.nodes[b].shape.clone();
        if bshape.len() == 2 && ashape.last() == bshape.first() {
            let k = bshape[0];
            let n = bshape[1];
            let rows = self.nodes[a].value.len() / k;
            let mut value = vec![0.0; rows * n];
            let av = &self.nodes[a].value;
            let bv = &self.nodes[b].value;
            for r in 0..rows {
                let arow = &av[r * k..(r + 1) * k];
                let orow = &mut value[r * n..(r + 1) * n];
                for (kk, &aval) in arow.iter().enumerate() {
                    let brow = &bv[kk * n..(kk + 1) * n];
                    for (o, &bval) in orow.iter_mut().zip(brow) {
                        *o += aval * bval;
                    }
                }
            }
            let mut shape = ashape[..ashape.len() - 1].to_vec();
            shape.push(n);
            let rg = self.rg(a) || self.rg(b);
            return Ok(self.push(shape, value, Op::MatMul { a, b, batched: false }, rg));
        }
        // Batched path.
        if ashape.len() >= 2
            && bshape.len() == ashape.len()
            && ashape[..ashape.len() - 2] == bshape[..bshape.len() - 2]
            && ashape[ashape.len() - 1] == bshape[bshape.len() - 2]
        {
            let m = ashape[ashape.len() - 2];
            let k = ashape[ashape.len() - 1];
            let n = bshape[bshape.len() - 1];
            let batch: usize = ashape[..ashape.len() - 2].iter().product();
            let mut value = vec![0.0; batch * m * n];
            let av = &self.nodes[a].value;
            let bv = &self.nodes[b].value;
            for bi in 0..batch {
                let abase = bi * m * k;
                let bbase = bi * k * n;
                let obase = bi * m * n;
                for r in 0..m {
                    let arow = &av[abase + r * k..abase + (r + 1) * k];
                    let orow = &mut value[obase + r * n..obase + (r + 1) * n];
                    for (kk, &aval) in arow.iter().enumerate() {
                        let brow = &bv[bbase + kk * n..bbase + (kk + 1) * n];
                        for (o, &bval) in orow.iter_mut().zip(brow) {
                            *o += aval * bval;
                        }
                    }
                }
            }
            let mut shape = ashape[..ashape.len() - 2].to_vec();
            shape.push(m);
            shape.push(n);
            let rg = self.rg(a) || self.rg(b);
            return Ok(self.push(shape, value, Op::MatMul { a, b, batched: true }, rg));
        }
        Err(shape_err(
            "matmul",
            format!("{ashape:?} × {bshape:?} not composable"),
        ))
    }

    /// 3D convolution, stride 1, zero padding k/2 (spatial dims preserved
    /// for odd kernels). x [B, Cin, D0, D1, D2], w [Cout, Cin, k, k, k],
    /// bias [Cout].
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let xs = self.nodes[x].shape.clone();
        let ws = self.nodes[w].shape.clone();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(shape_err(
                "conv3d",
                format!("expected rank-5 input and kernel, got {xs:?}, {ws:?}"),
            ));
        }
        let (batch, cin, d0, d1, d2) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (cout, k) = (ws[0], ws[2]);
        if ws[1] != cin || ws[3] != k || ws[4] != k || ws[2] != k {
            return Err(shape_err(
                "conv3d",
                format!("kernel {ws:?} incompatible with input {xs:?}"),
            ));
        }
        if self.nodes[b].shape != [cout] {
            return Err(shape_err(
                "conv3d",
                format!("bias {:?} for {cout} output channels", self.nodes[b].shape),
            ));
        }
        let pad = k / 2;
        let plane = d1 * d2;
        let vol = d0 * plane;
        let mut value = vec![0.0; batch * cout * vol];
        // Seed bias.
        for bi in 0..batch {
            for co in 0..cout {
                let bias = self.nodes[b].value[co];
                let base = (bi * cout + co) * vol;
                for v in &mut value[base..base + vol] {
                    *v = bias;
                }
            }
        }
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        for bi in 0..batch {
            for co in 0..cout {
                let obase = (bi * cout + co) * vol;
                for ci in 0..cin {
                    let ibase = (bi * cin + ci) * vol;
                    let wbase = (co * cin + ci) * k * k * k;
                    for kz in 0..k {
                        let oz = kz as isize - pad as isize;
                        let (zlo, zhi) = offset_range(d0, oz);
                        for ky in 0..k {
                            let oy = ky as isize - pad as isize;
                            let (ylo, yhi) = offset_range(d1, oy);
                            for kx in 0..k {
                                let ox = kx as isize - pad as isize;
                                let (xlo, xhi) = offset_range(d2, ox);
                                if xlo >= xhi {
                                    continue;
                                }
                                let weight = wv[wbase + (kz * k + ky) * k + kx];
                                for z in zlo..zhi {
                                    let iz = (z as isize + oz) as usize;
                                    for y in ylo..yhi {
                                        let iy = (y as isize + oy) as usize;
                                        let orow = obase + z * plane + y * d2;
                                        let irow = ibase
                                            + iz * plane
                                            + iy * d2
                                            + (xlo as isize + ox) as usize;
                                        let (dst, src) = (
                                            &mut value[orow + xlo..orow + xhi],
                                            &xv[irow..irow + (xhi - xlo)],
                                        );
                                        for (o, &i) in dst.iter_mut().zip(src) {
                                            *o += weight * i;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            vec![batch, cout, d0, d1, d2],
            value,
            Op::Conv3d { x, w, b, pad },
            rg,
        ))
    }

    /// 2×2×2 max pooling with stride 2 over the three trailing dims;
    /// trailing odd rows are dropped.
    pub fn maxpool3d(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let xs = self.nodes[x].shape.clone();
        if xs.len() != 5 {
            return Err(shape_err(
                "maxpool3d",
                format!("expected rank-5 input, got {xs:?}"),
            ));
        }
        let (batch, c, d0, d1, d2) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (o0, o1, o2) = (d0 / 2, d1 / 2, d2 / 2);
        if o0 == 0 || o1 == 0 || o2 == 0 {
            return Err(shape_err(
                "maxpool3d",
                format!("spatial dims {d0}×{d1}×{d2} too small to pool"),
            ));
        }
        let xv = &self.nodes[x].value;
        let in_plane = d1 * d2;
        let in_vol = d0 * in_plane;
        let out_vol = o0 * o1 * o2;
        let mut value = vec![0.0; batch * c * out_vol];
        let mut argmax = vec![0usize; batch * c * out_vol];
        for bc in 0..batch * c {
            let ibase = bc * in_vol;
            let obase = bc * out_vol;
            for z in 0..o0 {
                for y in 0..o1 {
                    for x2 in 0..o2 {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = ibase
                                        + (2 * z + dz) * in_plane
                                        + (2 * y + dy) * d2
                                        + 2 * x2
                                        + dx;
                                    if xv[idx] > best {
                                        best = xv[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        let o = obase + (z * o1 + y) * o2 + x2;
                        value[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![batch, c, o0, o1, o2],
            value,
            Op::MaxPool3d { x, argmax },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, NnError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x].value.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} → {shape:?}", self.nodes[x].shape),
            ));
        }
        let value = self.nodes[x].value.clone();
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::Reshape(x), rg))
    }

    /// Permute axes: out[idx] = in[idx ∘ perm].
    pub fn permute(&mut self, x: NodeId, perm: Vec<usize>) -> Result<NodeId, NnError> {
        let xs = self.nodes[x].shape.clone();
        let rank = xs.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let in_strides = strides(&xs);
        let out_count = self.nodes[x].value.len();
        let mut value = vec![0.0; out_count];
        let xv = &self.nodes[x].value;
        // Walk output indices in order; compute the source flat index.
        let mut idx = vec![0usize; rank];
        for v in value.iter_mut() {
            let mut src = 0;
            for (axis, &i) in idx.iter().enumerate() {
                src += i * in_strides[perm[axis]];
            }
            *v = xv[src];
            // Increment the multi-index.
            for axis in (0..rank).rev() {
                idx[axis] += 1;
                if idx[axis] < out_shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out_shape, value, Op::Permute { x, perm }, rg))
    }

    /// Layer normalization over the last dim with affine parameters.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, NnError> {
        let n = *self.nodes[x].shape.last().unwrap_or(&0);
        if self.nodes[gamma].shape != [n] || self.nodes[beta].shape != [n] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} for feature dim {n}",
                    self.nodes[gamma].shape, self.nodes[beta].shape
                ),
            ));
        }
        let rows = self.nodes[x].value.len() / n;
        let mut value = vec![0.0; self.nodes[x].value.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let xv = &self.nodes[x].value;
        let gv = &self.nodes[gamma].value;
        let bv = &self.nodes[beta].value;
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means.push(mean);
            rstds.push(rstd);
            let out = &mut value[r * n..(r + 1) * n];
            for j in 0..n {
                out[j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.nodes[x].shape.clone(),
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd: rstds,
                mean: means,
            },
            rg,
        ))
    }

    /// Softmax over the last dim. Handles −inf entries (fully masked
    /// positions get probability 0); rows that are all −inf are rejected
    /// upstream by the model.
    pub fn softmax_last_dim(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let n = *self.nodes[x].shape.last().unwrap_or(&0);
        if n == 0 {
            return Err(shape_err("softmax", "empty last dim".to_string()));
        }
        let mut value = self.nodes[x].value.clone();
        for row in value.chunks_exact_mut(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            self.nodes[x].shape.clone(),
            value,
            Op::SoftmaxLastDim(x),
            rg,
        ))
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> NodeId {
        if !self.train || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask: Vec<bool> = (0..self.nodes[x].value.len())
            .map(|_| self.rng.gen::<f64>() < keep)
            .collect();
        let value: Vec<f64> = self.nodes[x]
            .value
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v / keep } else { 0.0 })
            .collect();
        let rg = self.rg(x);
        self.push(
            self.nodes[x].shape.clone(),
            value,
            Op::Dropout { x, mask, keep },
            rg,
        )
    }

    /// Mean cross-entropy over unmasked positions: logits viewed as
    /// [R, classes], one label per row, mask true = counted.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        mask: &[bool],
    ) -> Result<NodeId, NnError> {
        let c = *self.nodes[logits].shape.last().unwrap_or(&0);
        if c == 0 {
            return Err(shape_err("cross_entropy", "empty class dim".to_string()));
        }
        let rows = self.nodes[logits].value.len() / c;
        if labels.len() != rows || mask.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{rows} rows vs {} labels / {} mask", labels.len(), mask.len()),
            ));
        }
        if let Some(&bad) = labels
            .iter()
            .zip(mask)
            .find(|&(&l, &m)| m && l >= c)
            .map(|(l, _)| l)
        {
            return Err(shape_err(
                "cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(NnError::AllMasked);
        }
        let xv = &self.nodes[logits].value;
        let mut probs = vec![0.0; xv.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            let prow = &mut probs[r * c..(r + 1) * c];
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - max).exp();
                sum += *p;
            }
            for p in prow.iter_mut() {
                *p /= sum;
            }
            if mask[r] {
                loss += sum.ln() + max - row[labels[r]];
            }
        }
        loss /= count as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.nodes[x].value.iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![total], Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar loss. Populates gradients for every node
    /// on a parameter-reaching path. Errors if called twice on one tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NnError> {
        if self.consumed {
            return Err(NnError::StaleGraph);
        }
        if self.nodes[loss].value.len() != 1 {
            return Err(NnError::NotScalar {
                shape: self.nodes[loss].shape.clone(),
            });
        }
        self.consumed = true;
        for node in &mut self.nodes {
            node.grad = vec![0.0; node.value.len()];
        }
        self.nodes[loss].grad[0] = 1.0;

        for id in (0..=loss).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backward_node(id);
        }
        Ok(())
    }

    fn backward_node(&mut self, id: NodeId) {
        // Take the gradient out to satisfy the borrow checker; ops read it
        // and accumulate into input grads.
        let g = std::mem::take(&mut self.nodes[id].grad);
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                accumulate(&mut self.nodes[a].grad, &g);
                accumulate(&mut self.nodes[b].grad, &g);
            }
            &Op::Mul(a, b) => {
                // Clone: a and b may alias (x·x).
                let av = self.nodes[a].value.clone();
                let bv = self.nodes[b].value.clone();
                for ((ga, &gv), &bvv) in self.nodes[a].grad.iter_mut().zip(&g).zip(&bv) {
                    *ga += gv * bvv;
                }
                for ((gb, &gv), &avv) in self.nodes[b].grad.iter_mut().zip(&g).zip(&av) {
                    *gb += gv * avv;
                }
            }
            &Op::Scale(a, c) => {
                for (ga, &gv) in self.nodes[a].grad.iter_mut().zip(&g) {
                    *ga += gv * c;
                }
            }
            &Op::AddBias(x, b) => {
                accumulate(&mut self.nodes[x].grad, &g);
                let n = self.nodes[b].grad.len();
                for row in g.chunks_exact(n) {
                    for (gb, &gv) in self.nodes[b].grad.iter_mut().zip(row) {
                        *gb += gv;
                    }
                }
            }
            &Op::Relu(x) => {
                let xv = std::mem::take(&mut self.nodes[x].value);
                for ((gx, &gv), &v) in self.nodes[x].grad.iter_mut().zip(&g).zip(&xv) {
                    if v > 0.0 {
                        *gx += gv;
                    }
                }
                self.nodes[x].value = xv;
            }
            &Op::MatMul { a, b, batched } => self.backward_matmul(a, b, batched, &g),
            &Op::Conv3d { x, w, b, pad } => self.backward_conv3d(id, x, w, b, pad, &g),
            Op::MaxPool3d { x, argmax } => {
                let x = *x;
                let pairs: Vec<(usize, f64)> = argmax
                    .iter()
                    .zip(&g)
                    .map(|(&i, &gv)| (i, gv))
                    .collect();
                for (i, gv) in pairs {
                    self.nodes[x].grad[i] += gv;
                }
            }
            &Op::Reshape(x) => accumulate(&mut self.nodes[x].grad, &g),
            Op::Permute { x, perm } => {
                let x = *x;
                let perm = perm.clone();
                let out_shape = self.nodes[id].shape.clone();
                let in_strides = strides(&self.nodes[x].shape);
                let rank = perm.len();
                let mut idx = vec![0usize; rank];
                for &gv in &g {
                    let mut src = 0;
                    for (axis, &i) in idx.iter().enumerate() {
                        src += i * in_strides[perm[axis]];
                    }
                    self.nodes[x].grad[src] += gv;
                    for axis in (0..rank).rev() {
                        idx[axis] += 1;
                        if idx[axis] < out_shape[axis] {
                            break;
                        }
                        idx[axis] = 0;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
                mean,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let rstd = rstd.clone();
                let mean = mean.clone();
                let n = self.nodes[gamma].value.len();
                let xv = std::mem::take(&mut self.nodes[x].value);
                let gv = std::mem::take(&mut self.nodes[gamma].value);
                for (r, grow) in g.chunks_exact(n).enumerate() {
                    let xrow = &xv[r * n..(r + 1) * n];
                    // gy = dL/dy ⊙ gamma; reductions over the row.
                    let mut sum_gy = 0.0;
                    let mut sum_gy_xhat = 0.0;
                    for j in 0..n {
                        let xhat = (xrow[j] - mean[r]) * rstd[r];
                        let gy = grow[j] * gv[j];
                        sum_gy += gy;
                        sum_gy_xhat += gy * xhat;
                    }
                    let inv_n = 1.0 / n as f64;
                    for j in 0..n {
                        let xhat = (xrow[j] - mean[r]) * rstd[r];
                        let gy = grow[j] * gv[j];
                        self.nodes[x].grad[r * n + j] +=
                            rstd[r] * (gy - inv_n * sum_gy - xhat * inv_n * sum_gy_xhat);
                        self.nodes[gamma].grad[j] += grow[j] * xhat;
                        self.nodes[beta].grad[j] += grow[j];
                    }
                }
                self.nodes[x].value = xv;
                self.nodes[gamma].value = gv;
            }
            &Op::SoftmaxLastDim(x) => {
                let n = *self.nodes[id].shape.last().expect("non-empty shape");
                let yv = std::mem::take(&mut self.nodes[id].value);
                for (r, (grow, yrow)) in g.chunks_exact(n).zip(yv.chunks_exact(n)).enumerate() {
                    let dot: f64 = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        self.nodes[x].grad[r * n + j] += yrow[j] * (grow[j] - dot);
                    }
                }
                self.nodes[id].value = yv;
            }
            Op::Dropout { x, mask, keep } => {
                let (x, keep) = (*x, *keep);
                let mask = mask.clone();
                for ((gx, &gv), &m) in self.nodes[x].grad.iter_mut().zip(&g).zip(&mask) {
                    if m {
                        *gx += gv / keep;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                mask,
                probs,
                count,
            } => {
                let logits = *logits;
                let scale = g[0] / *count as f64;
                let c = *self.nodes[logits].shape.last().expect("non-empty shape");
                let labels = labels.clone();
                let mask = mask.clone();
                let probs = probs.clone();
                for r in 0..labels.len() {
                    if !mask[r] {
                        continue;
                    }
                    let prow = &probs[r * c..(r + 1) * c];
                    let grow = &mut self.nodes[logits].grad[r * c..(r + 1) * c];
                    for j in 0..c {
                        let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                        grow[j] += scale * (prow[j] - onehot);
                    }
                }
            }
            &Op::Sum(x) => {
                let gv = g[0];
                for gx in self.nodes[x].grad.iter_mut() {
                    *gx += gv;
                }
            }
        }
        self.nodes[id].grad = g;
    }

    fn backward_matmul(&mut self, a: NodeId, b: NodeId, batched: bool, g: &[f64]) {
        if !batched {
            let k = self.nodes[b].shape[0];
            let n = self.nodes[b].shape[1];
            let rows = self.nodes[a].value.len() / k;
            let av = std::mem::take(&mut self.nodes[a].value);
            let bv = std::mem::take(&mut self.nodes[b].value);
            if self.nodes[a].requires_grad {
                for r in 0..rows {
                    let grow = &g[r * n..(r + 1) * n];
                    let garow = &mut self.nodes[a].grad[r * k..(r + 1) * k];
                    for (kk, ga) in garow.iter_mut().enumerate() {
                        let brow = &bv[kk * n..(kk + 1) * n];
                        let mut acc = 0.0;
                        for (&gv, &bvv) in grow.iter().zip(brow) {
                            acc += gv * bvv;
                        }
                        *ga += acc;
                    }
                }
            }
            if self.nodes[b].requires_grad {
                for r in 0..rows {
                    let arow = &av[r * k..(r + 1) * k];
                    let grow = &g[r * n..(r + 1) * n];
                    for (kk, &avv) in arow.iter().enumerate() {
                        let gbrow = &mut self.nodes[b].grad[kk * n..(kk + 1) * n];
                        for (gb, &gv) in gbrow.iter_mut().zip(grow) {
                            *gb += avv * gv;
                        }
                    }
                }
            }
            self.nodes[a].value = av;
            self.nodes[b].value = bv;
        } else {
            let ashape = self.nodes[a].shape.clone();
            let bshape = self.nodes[b].shape.clone();
            let m = ashape[ashape.len() - 2];
            let k = ashape[ashape.len() - 1];
            let n = bshape[bshape.len() - 1];
            let batch: usize = ashape[..ashape.len() - 2].iter().product();
            let av = std::mem::take(&mut self.nodes[a].value);
            let bv = std::mem::take(&mut self.nodes[b].value);
            for bi in 0..batch {
                let abase = bi * m * k;
                let bbase = bi * k * n;
                let gbase = bi * m * n;
                if self.nodes[a].requires_grad {
                    for r in 0..m {
                        let grow = &g[gbase + r * n..gbase + (r + 1) * n];
                        let garow = &mut self.nodes[a].grad[abase + r * k..abase + (r + 1) * k];
                        for (kk, ga) in garow.iter_mut().enumerate() {
                            let brow = &bv[bbase + kk * n..bbase + (kk + 1) * n];
                            let mut acc = 0.0;
                            for (&gv, &bvv) in grow.iter().zip(brow) {
                                acc += gv * bvv;
                            }
                            *ga += acc;
                        }
                    }
                }
                if self.nodes[b].requires_grad {
                    for r in 0..m {
                        let arow = &av[abase + r * k..abase + (r + 1) * k];
                        let grow = &g[gbase + r * n..gbase + (r + 1) * n];
                        for (kk, &avv) in arow.iter().enumerate() {
                            let gbrow =
                                &mut self.nodes[b].grad[bbase + kk * n..bbase + (kk + 1) * n];
                            for (gb, &gv) in gbrow.iter_mut().zip(grow) {
                                *gb += avv * gv;
                            }
                        }
                    }
                }
            }
            self.nodes[a].value = av;
            self.nodes[b].value = bv;
        }
    }

    fn backward_conv3d(
        &mut self,
        out: NodeId,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: usize,
        g: &[f64],
    ) {
        let xs = self.nodes[x].shape.clone();
        let os = self.nodes[out].shape.clone();
        let (batch, cin, d0, d1, d2) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let cout = os[1];
        let k = self.nodes[w].shape[2];
        let plane = d1 * d2;
        let vol = d0 * plane;

        // Bias gradient: sum over batch and spatial dims.
        if self.nodes[b].requires_grad {
            for bi in 0..batch {
                for co in 0..cout {
                    let base = (bi * cout + co) * vol;
                    let sum: f64 = g[base..base + vol].iter().sum();
                    self.nodes[b].grad[co] += sum;
                }
            }
        }

        let xv = std::mem::take(&mut self.nodes[x].value);
        let wv = std::mem::take(&mut self.nodes[w].value);
        let want_dx = self.nodes[x].requires_grad;
        let want_dw = self.nodes[w].requires_grad;
        for bi in 0..batch {
            for co in 0..cout {
                let obase = (bi * cout + co) * vol;
                for ci in 0..cin {
                    let ibase = (bi * cin + ci) * vol;
                    let wbase = (co * cin + ci) * k * k * k;
                    for kz in 0..k {
                        let oz = kz as isize - pad as isize;
                        let (zlo, zhi) = offset_range(d0, oz);
                        for ky in 0..k {
                            let oy = ky as isize - pad as isize;
                            let (ylo, yhi) = offset_range(d1, oy);
                            for kx in 0..k {
                                let ox = kx as isize - pad as isize;
                                let (xlo, xhi) = offset_range(d2, ox);
                                if xlo >= xhi {
                                    continue;
                                }
                                let widx = wbase + (kz * k + ky) * k + kx;
                                let weight = wv[widx];
                                let mut dw_acc = 0.0;
                                for z in zlo..zhi {
                                    let iz = (z as isize + oz) as usize;
                                    for y in ylo..yhi {
                                        let iy = (y as isize + oy) as usize;
                                        let orow = obase + z * plane + y * d2 + xlo;
                                        let irow = ibase
                                            + iz * plane
                                            + iy * d2
                                            + (xlo as isize + ox) as usize;
                                        let len = xhi - xlo;
                                        let grow = &g[orow..orow + len];
                                        if want_dw {
                                            let xrow = &xv[irow..irow + len];
                                            let mut acc = 0.0;
                                            for (&gv, &iv) in grow.iter().zip(xrow) {
                                                acc += gv * iv;
                                            }
                                            dw_acc += acc;
                                        }
                                        if want_dx {
                                            let dxrow =
                                                &mut self.nodes[x].grad[irow..irow + len];
                                            for (dx, &gv) in dxrow.iter_mut().zip(grow) {
                                                *dx += weight * gv;
                                            }
                                        }
                                    }
                                }
                                if want_dw {
                                    self.nodes[w].grad[widx] += dw_acc;
                                }
                            }
                        }
                    }
                }
            }
        }
        self.nodes[x].value = xv;
        self.nodes[w].value = wv;
    }
}

/// Valid output range [lo, hi) along one axis for an input offset `o`.
#[inline]
fn offset_range(d: usize, o: isize) -> (usize, usize) {
    let lo = (-o).max(0) as usize;
    let hi_signed = (d as isize).min(d as isize - o);
    (lo, hi_signed.max(0) as usize)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
