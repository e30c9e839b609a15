//! Define-by-run reverse-mode tape.
//!
//! Each op records its parents and computes its value immediately; a node id
//! is just an index into the tape. Parents always have smaller ids, so one
//! reverse sweep from the loss visits nodes in a valid order. `backward`
//! never mutates the tape and may be called repeatedly with the same result.

use super::{GradVector, ParameterStore, Tensor, LAYER_NORM_EPS, MASK_FILL};
use crate::error::Error;
use crate::Result;

pub type NodeId = usize;

/// Attention projection weights, by node id: query, key, value, output,
/// each a `[D, D]` matrix with a `[D]` bias.
#[derive(Debug, Clone, Copy)]
pub struct MhsaWeights {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

#[derive(Debug)]
struct MhsaSaved {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmaxed attention, `blocks * heads * block_len * block_len`.
    attn: Vec<f64>,
    /// Concatenated head outputs before the output projection.
    o: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    /// Trainable parameter; `offset`/`len` locate it in the flat view.
    Leaf { offset: usize, len: usize },
    Const,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, row: NodeId },
    AddTile { a: NodeId, tile: NodeId },
    PrependTile { tile: NodeId, a: NodeId, block: usize },
    Scale { a: NodeId, c: f64 },
    Reshape { a: NodeId },
    Relu { a: NodeId },
    LayerNorm { a: NodeId },
    MeanPoolBlocks { a: NodeId, block: usize },
    ConcatRows { a: NodeId, b: NodeId },
    Mhsa { x: NodeId, w: MhsaWeights, heads: usize, block: usize, saved: MhsaSaved },
    SelectMask { a: NodeId, bits: Vec<bool> },
    MulMask { a: NodeId, bits: Vec<bool> },
    MaskedCe { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Result of a reverse sweep. `connected` is false when no trainable leaf
/// was reachable from the loss, in which case the gradient is all zero.
#[derive(Debug)]
pub struct BackwardReport {
    pub grad: GradVector,
    pub connected: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes, keeping the allocation for reuse across steps.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let t = self.value(id);
        if t.len() != 1 {
            return Err(Error::InvalidShape {
                op: "scalar",
                shape: t.shape().to_vec(),
                reason: "expected a single element".into(),
            });
        }
        Ok(t.values()[0])
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Registers a store entry. Trainable entries become tracked leaves;
    /// frozen entries enter as constants, severing their gradient path.
    pub fn leaf(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId> {
        let tensor = store.get(name)?.clone();
        let op = match store.flat_slot(name)? {
            Some((offset, len)) => Op::Leaf { offset, len },
            None => Op::Const,
        };
        Ok(self.push(tensor, op))
    }

    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, Op::Const)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).rows_cols()?;
        let (kb, n) = self.value(b).rows_cols()?;
        if ka != kb {
            return Err(self.shape_err("matmul", a, b));
        }
        let out = mm(self.value(a).values(), m, ka, self.value(b).values(), n);
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::raw(shape, out), Op::Add { a, b }))
    }

    /// Adds a `[n]` (or `[1,n]`) row to every row of `[m,n]`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).rows_cols()?;
        let (rr, rn) = self.value(row).rows_cols()?;
        if rr != 1 || rn != n {
            return Err(self.shape_err("add_row", a, row));
        }
        let rv = self.value(row).values().to_vec();
        let mut out = self.value(a).values().to_vec();
        for r in 0..m {
            for j in 0..n {
                out[r * n + j] += rv[j];
            }
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::raw(shape, out), Op::AddRow { a, row }))
    }

    /// Adds a `[t,n]` tile to `[b*t,n]`, repeating it per block of `t` rows.
    pub fn add_tile(&mut self, a: NodeId, tile: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).rows_cols()?;
        let (t, tn) = self.value(tile).rows_cols()?;
        if tn != n || t == 0 || m % t != 0 {
            return Err(self.shape_err("add_tile", a, tile));
        }
        let tv = self.value(tile).values().to_vec();
        let mut out = self.value(a).values().to_vec();
        for r in 0..m {
            let tr = r % t;
            for j in 0..n {
                out[r * n + j] += tv[tr * n + j];
            }
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::raw(shape, out), Op::AddTile { a, tile }))
    }

    /// Prepends a `[p,n]` tile to each `block`-row group of `[b*block,n]`,
    /// producing `[b*(p+block),n]`. Used to attach prompt tokens to every
    /// example of a batch in one node.
    pub fn prepend_tile(&mut self, tile: NodeId, a: NodeId, block: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).rows_cols()?;
        let (p, tn) = self.value(tile).rows_cols()?;
        if tn != n || block == 0 || m % block != 0 {
            return Err(self.shape_err("prepend_tile", a, tile));
        }
        let groups = m / block;
        let tv = self.value(tile).values();
        let av = self.value(a).values();
        let stride = p + block;
        let mut out = vec![0.0; groups * stride * n];
        for g in 0..groups {
            let base = g * stride * n;
            out[base..base + p * n].copy_from_slice(tv);
            out[base + p * n..base + stride * n]
                .copy_from_slice(&av[g * block * n..(g + 1) * block * n]);
        }
        Ok(self.push(
            Tensor::raw(vec![groups * stride, n], out),
            Op::PrependTile { tile, a, block },
        ))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.value(a).values().iter().map(|x| c * x).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::raw(shape, out), Op::Scale { a, c })
    }

    /// Reinterprets the row-major buffer under a new shape of equal size.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("source has {} elements", self.value(a).len()),
            });
        }
        let out = self.value(a).values().to_vec();
        Ok(self.push(Tensor::raw(shape, out), Op::Reshape { a }))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(a).values().iter().map(|x| x.max(0.0)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::raw(shape, out), Op::Relu { a })
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).rows_cols()?;
        let av = self.value(a).values();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &av[r * n..(r + 1) * n];
            let (mu, std) = row_stats(row);
            for j in 0..n {
                out[r * n + j] = (row[j] - mu) / std;
            }
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::raw(shape, out), Op::LayerNorm { a }))
    }

    /// Mean over every row: `[t,n] -> [1,n]`.
    pub fn mean_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, _) = self.value(a).rows_cols()?;
        self.mean_pool_blocks(a, m)
    }

    /// Mean over each `block`-row group: `[b*block,n] -> [b,n]`.
    pub fn mean_pool_blocks(&mut self, a: NodeId, block: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).rows_cols()?;
        if block == 0 || m % block != 0 {
            return Err(Error::InvalidShape {
                op: "mean_pool_blocks",
                shape: self.value(a).shape().to_vec(),
                reason: format!("rows {m} not divisible by block {block}"),
            });
        }
        let groups = m / block;
        let av = self.value(a).values();
        let mut out = vec![0.0; groups * n];
        for r in 0..m {
            let g = r / block;
            for j in 0..n {
                out[g * n + j] += av[r * n + j];
            }
        }
        for v in out.iter_mut() {
            *v /= block as f64;
        }
        Ok(self.push(
            Tensor::raw(vec![groups, n], out),
            Op::MeanPoolBlocks { a, block },
        ))
    }

    /// Row-wise concatenation: `[p,n]` then `[q,n]` -> `[p+q,n]`.
    pub fn concat_tokens(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (p, n) = self.value(a).rows_cols()?;
        let (q, nb) = self.value(b).rows_cols()?;
        if n != nb {
            return Err(self.shape_err("concat_tokens", a, b));
        }
        let mut out = Vec::with_capacity((p + q) * n);
        out.extend_from_slice(self.value(a).values());
        out.extend_from_slice(self.value(b).values());
        Ok(self.push(Tensor::raw(vec![p + q, n], out), Op::ConcatRows { a, b }))
    }

    /// Multi-head self-attention over each `block`-row group of `x`.
    /// Attention never crosses group boundaries, so a batch of examples can
    /// share one node.
    pub fn mhsa(&mut self, x: NodeId, w: MhsaWeights, heads: usize, block: usize) -> Result<NodeId> {
        let (rows, d) = self.value(x).rows_cols()?;
        if heads == 0 || d % heads != 0 || block == 0 || rows % block != 0 {
            return Err(Error::InvalidShape {
                op: "mhsa",
                shape: self.value(x).shape().to_vec(),
                reason: format!("rows {rows}, width {d}, heads {heads}, block {block}"),
            });
        }
        for (mat, bias) in [(w.wq, w.bq), (w.wk, w.bk), (w.wv, w.bv), (w.wo, w.bo)] {
            let (wr, wc) = self.value(mat).rows_cols()?;
            let (br, bc) = self.value(bias).rows_cols()?;
            if wr != d || wc != d || br != 1 || bc != d {
                return Err(self.shape_err("mhsa", x, mat));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let xv = self.value(x).values();
        let proj = |wm: NodeId, bm: NodeId, tape: &Tape| -> Vec<f64> {
            let mut out = mm(xv, rows, d, tape.value(wm).values(), d);
            let b = tape.value(bm).values();
            for r in 0..rows {
                for j in 0..d {
                    out[r * d + j] += b[j];
                }
            }
            out
        };
        let q = proj(w.wq, w.bq, self);
        let k = proj(w.wk, w.bk, self);
        let v = proj(w.wv, w.bv, self);

        let groups = rows / block;
        let mut attn = vec![0.0; groups * heads * block * block];
        let mut o = vec![0.0; rows * d];
        for g in 0..groups {
            let r0 = g * block;
            for h in 0..heads {
                let c0 = h * dh;
                let a0 = (g * heads + h) * block * block;
                // scores, then a row-wise stable softmax
                for i in 0..block {
                    for j in 0..block {
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += q[(r0 + i) * d + c0 + c] * k[(r0 + j) * d + c0 + c];
                        }
                        attn[a0 + i * block + j] = dot * scale;
                    }
                }
                for i in 0..block {
                    let row = &mut attn[a0 + i * block..a0 + (i + 1) * block];
                    softmax_in_place(row);
                }
                for i in 0..block {
                    for j in 0..block {
                        let a = attn[a0 + i * block + j];
                        for c in 0..dh {
                            o[(r0 + i) * d + c0 + c] += a * v[(r0 + j) * d + c0 + c];
                        }
                    }
                }
            }
        }
        let mut y = mm(&o, rows, d, self.value(w.wo).values(), d);
        let bo = self.value(w.bo).values();
        for r in 0..rows {
            for j in 0..d {
                y[r * d + j] += bo[j];
            }
        }
        let saved = MhsaSaved { q, k, v, attn, o };
        Ok(self.push(
            Tensor::raw(vec![rows, d], y),
            Op::Mhsa { x, w, heads, block, saved },
        ))
    }

    /// Keeps logits where `bits` is set and fills the rest with
    /// [`MASK_FILL`], column-wise over every row. Gradients do not flow
    /// into masked-out columns.
    pub fn select_mask(&mut self, a: NodeId, bits: &[bool]) -> Result<NodeId> {
        let (m, n) = self.value(a).rows_cols()?;
        self.check_bits(bits, n)?;
        let mut out = self.value(a).values().to_vec();
        for r in 0..m {
            for j in 0..n {
                if !bits[j] {
                    out[r * n + j] = MASK_FILL;
                }
            }
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::raw(shape, out), Op::SelectMask { a, bits: bits.to_vec() }))
    }

    /// Ablation variant: multiplies masked-out logits by zero instead of
    /// excluding them, so they still feed the softmax normalizer at `e^0`.
    pub fn mul_mask(&mut self, a: NodeId, bits: &[bool]) -> Result<NodeId> {
        let (m, n) = self.value(a).rows_cols()?;
        self.check_bits(bits, n)?;
        let mut out = self.value(a).values().to_vec();
        for r in 0..m {
            for j in 0..n {
                if !bits[j] {
                    out[r * n + j] = 0.0;
                }
            }
        }
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::raw(shape, out), Op::MulMask { a, bits: bits.to_vec() }))
    }

    /// Mean cross entropy over rows of `[b,N]` logits, with masked-out
    /// classes excluded from the softmax normalizer entirely. The gradient
    /// with respect to a masked-out logit is exactly zero.
    pub fn masked_softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        bits: &[bool],
    ) -> Result<NodeId> {
        let (b, n) = self.value(logits).rows_cols()?;
        self.check_bits(bits, n)?;
        if labels.len() != b {
            return Err(Error::InvalidShape {
                op: "masked_softmax_cross_entropy",
                shape: self.value(logits).shape().to_vec(),
                reason: format!("{} labels for {} rows", labels.len(), b),
            });
        }
        for &label in labels {
            if label >= n {
                return Err(Error::LabelOutOfRange { label, classes: n });
            }
            if !bits[label] {
                return Err(Error::MaskedLabel { label });
            }
        }
        let lv = self.value(logits).values();
        let mut probs = vec![0.0; b * n];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv[r * n..(r + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if bits[j] && row[j] > mx {
                    mx = row[j];
                }
            }
            let mut z = 0.0;
            for j in 0..n {
                if bits[j] {
                    z += (row[j] - mx).exp();
                }
            }
            let lse = mx + z.ln();
            for j in 0..n {
                if bits[j] {
                    probs[r * n + j] = (row[j] - lse).exp();
                }
            }
            total += lse - row[label];
        }
        let loss = total / b as f64;
        Ok(self.push(
            Tensor::raw(vec![1], vec![loss]),
            Op::MaskedCe { logits, labels: labels.to_vec(), probs },
        ))
    }

    fn check_bits(&self, bits: &[bool], n: usize) -> Result<()> {
        if bits.len() != n {
            return Err(Error::MaskWidthMismatch { got: bits.len(), expected: n });
        }
        if !bits.iter().any(|&b| b) {
            return Err(Error::EmptyMask { width: n });
        }
        Ok(())
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    /// Reverse sweep from a scalar loss. Returns the gradient over the
    /// store's flat trainable view; frozen entries entered the graph as
    /// constants, so they contribute nothing.
    pub fn backward(&self, loss: NodeId, store: &ParameterStore) -> Result<GradVector> {
        Ok(self.backward_report(loss, store)?.grad)
    }

    /// As [`Tape::backward`], also reporting whether any trainable leaf was
    /// reachable; an unreachable loss warns and yields a zero gradient.
    pub fn backward_report(&self, loss: NodeId, store: &ParameterStore) -> Result<BackwardReport> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: self.value(loss).shape().to_vec(),
                reason: "loss must be a scalar".into(),
            });
        }
        let mut out = vec![0.0; store.trainable_len()];
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss).map(|_| None).collect();
        grads[loss] = Some(vec![1.0]);
        let mut touched_leaf = false;

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Const => {}
                Op::Leaf { offset, len } => {
                    touched_leaf = true;
                    for (i, gi) in g.iter().enumerate().take(*len) {
                        out[offset + i] += gi;
                    }
                }
                Op::Matmul { a, b } => {
                    let (m, k) = self.value(*a).rows_cols()?;
                    let (_, n) = self.value(*b).rows_cols()?;
                    let da = mm_nt(&g, m, n, self.value(*b).values(), k);
                    let db = mm_tn(self.value(*a).values(), m, k, &g, n);
                    self.acc(&mut grads, *a, da);
                    self.acc(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g);
                }
                Op::AddRow { a, row } => {
                    let (m, n) = self.value(*a).rows_cols()?;
                    let mut dr = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            dr[j] += g[r * n + j];
                        }
                    }
                    self.acc(&mut grads, *a, g);
                    self.acc(&mut grads, *row, dr);
                }
                Op::AddTile { a, tile } => {
                    let (m, n) = self.value(*a).rows_cols()?;
                    let (t, _) = self.value(*tile).rows_cols()?;
                    let mut dt = vec![0.0; t * n];
                    for r in 0..m {
                        let tr = r % t;
                        for j in 0..n {
                            dt[tr * n + j] += g[r * n + j];
                        }
                    }
                    self.acc(&mut grads, *a, g);
                    self.acc(&mut grads, *tile, dt);
                }
                Op::PrependTile { tile, a, block } => {
                    let (m, n) = self.value(*a).rows_cols()?;
                    let (p, _) = self.value(*tile).rows_cols()?;
                    let groups = m / block;
                    let stride = p + block;
                    let mut dt = vec![0.0; p * n];
                    let mut da = vec![0.0; m * n];
                    for grp in 0..groups {
                        let base = grp * stride * n;
                        for i in 0..p * n {
                            dt[i] += g[base + i];
                        }
                        da[grp * block * n..(grp + 1) * block * n]
                            .copy_from_slice(&g[base + p * n..base + stride * n]);
                    }
                    self.acc(&mut grads, *a, da);
                    self.acc(&mut grads, *tile, dt);
                }
                Op::Scale { a, c } => {
                    self.acc(&mut grads, *a, g.iter().map(|x| c * x).collect());
                }
                Op::Reshape { a } => {
                    self.acc(&mut grads, *a, g);
                }
                Op::Relu { a } => {
                    let av = self.value(*a).values();
                    let da = g
                        .iter()
                        .zip(av)
                        .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *a, da);
                }
                Op::LayerNorm { a } => {
                    let (m, n) = self.value(*a).rows_cols()?;
                    let av = self.value(*a).values();
                    let yv = self.value(id).values();
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        let row = &av[r * n..(r + 1) * n];
                        let y = &yv[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let (_, std) = row_stats(row);
                        let gmean = gr.iter().sum::<f64>() / n as f64;
                        let gydot =
                            gr.iter().zip(y).map(|(gi, yi)| gi * yi).sum::<f64>() / n as f64;
                        for j in 0..n {
                            da[r * n + j] = (gr[j] - gmean - y[j] * gydot) / std;
                        }
                    }
                    self.acc(&mut grads, *a, da);
                }
                Op::MeanPoolBlocks { a, block } => {
                    let (m, n) = self.value(*a).rows_cols()?;
                    let inv = 1.0 / *block as f64;
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        let grp = r / block;
                        for j in 0..n {
                            da[r * n + j] = g[grp * n + j] * inv;
                        }
                    }
                    self.acc(&mut grads, *a, da);
                }
                Op::ConcatRows { a, b } => {
                    let alen = self.value(*a).len();
                    self.acc(&mut grads, *a, g[..alen].to_vec());
                    self.acc(&mut grads, *b, g[alen..].to_vec());
                }
                Op::Mhsa { x, w, heads, block, saved } => {
                    let (rows, d) = self.value(*x).rows_cols()?;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let groups = rows / block;

                    // Output projection: y = o @ wo + bo.
                    let dwo = mm_tn(&saved.o, rows, d, &g, d);
                    let mut dbo = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dbo[j] += g[r * d + j];
                        }
                    }
                    let do_ = mm_nt(&g, rows, d, self.value(w.wo).values(), d);

                    let mut dq = vec![0.0; rows * d];
                    let mut dk = vec![0.0; rows * d];
                    let mut dv = vec![0.0; rows * d];
                    for grp in 0..groups {
                        let r0 = grp * *block;
                        for h in 0..*heads {
                            let c0 = h * dh;
                            let a0 = (grp * heads + h) * block * block;
                            for i in 0..*block {
                                // dA_ij = sum_c do[i,c] v[j,c]; then softmax rows.
                                let mut da_row = vec![0.0; *block];
                                for j in 0..*block {
                                    let mut dot = 0.0;
                                    for c in 0..dh {
                                        dot += do_[(r0 + i) * d + c0 + c]
                                            * saved.v[(r0 + j) * d + c0 + c];
                                    }
                                    da_row[j] = dot;
                                }
                                let arow = &saved.attn[a0 + i * block..a0 + (i + 1) * block];
                                let dot: f64 =
                                    da_row.iter().zip(arow).map(|(x, a)| x * a).sum();
                                for j in 0..*block {
                                    // ds = a * (da - rowdot), then undo the score scale
                                    let ds = arow[j] * (da_row[j] - dot) * scale;
                                    for c in 0..dh {
                                        dq[(r0 + i) * d + c0 + c] +=
                                            ds * saved.k[(r0 + j) * d + c0 + c];
                                        dk[(r0 + j) * d + c0 + c] +=
                                            ds * saved.q[(r0 + i) * d + c0 + c];
                                    }
                                    // dV_j += A_ij * dO_i
                                    let a = arow[j];
                                    for c in 0..dh {
                                        dv[(r0 + j) * d + c0 + c] +=
                                            a * do_[(r0 + i) * d + c0 + c];
                                    }
                                }
                            }
                        }
                    }

                    let xv = self.value(*x).values();
                    let mut dx = mm_nt(&dq, rows, d, self.value(w.wq).values(), d);
                    add_into(&mut dx, &mm_nt(&dk, rows, d, self.value(w.wk).values(), d));
                    add_into(&mut dx, &mm_nt(&dv, rows, d, self.value(w.wv).values(), d));

                    for (dm, dvec) in [(w.wq, &dq), (w.wk, &dk), (w.wv, &dv)] {
                        self.acc(&mut grads, dm, mm_tn(xv, rows, d, dvec, d));
                    }
                    for (bm, dvec) in [(w.bq, &dq), (w.bk, &dk), (w.bv, &dv)] {
                        let mut db = vec![0.0; d];
                        for r in 0..rows {
                            for j in 0..d {
                                db[j] += dvec[r * d + j];
                            }
                        }
                        self.acc(&mut grads, bm, db);
                    }
                    self.acc(&mut grads, w.wo, dwo);
                    self.acc(&mut grads, w.bo, dbo);
                    self.acc(&mut grads, *x, dx);
                }
                Op::SelectMask { a, bits } | Op::MulMask { a, bits } => {
                    let (m, n) = self.value(*a).rows_cols()?;
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        for j in 0..n {
                            if bits[j] {
                                da[r * n + j] = g[r * n + j];
                            }
                        }
                    }
                    self.acc(&mut grads, *a, da);
                }
                Op::MaskedCe { logits, labels, probs } => {
                    let (b, n) = self.value(*logits).rows_cols()?;
                    let gs = g[0] / b as f64;
                    let mut dl = vec![0.0; b * n];
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..n {
                            // probs is zero at masked-out columns, so their
                            // gradient stays exactly zero.
                            let p = probs[r * n + j];
                            if p != 0.0 || j == label {
                                dl[r * n + j] =
                                    gs * (p - if j == label { 1.0 } else { 0.0 });
                            }
                        }
                    }
                    self.acc(&mut grads, *logits, dl);
                }
            }
        }
        if !touched_leaf {
            log::warn!("backward: loss is not connected to any trainable parameter");
        }
        Ok(BackwardReport { grad: GradVector::new(out), connected: touched_leaf })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contribution: Vec<f64>) {
        match &mut grads[id] {
            Some(g) => add_into(g, &contribution),
            slot => *slot = Some(contribution),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row mean and the stabilized standard deviation shared by layer-norm
/// forward and backward.
fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, (var + LAYER_NORM_EPS).sqrt())
}

fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// `[m,k] x [k,n]`, row-major.
fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

/// `a x b^T` where `a` is `[m,k]` and `b` is `[n,k]`.
fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `a^T x b` where `a` is `[k,m]` and `b` is `[k,n]`.
fn mm_tn(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a[kk * m + i];
            if aki == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aki * brow[j];
            }
        }
    }
    c
}
