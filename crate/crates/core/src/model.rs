//! The prompted transformer.
//!
//! A frozen backbone maps a feature vector to a token grid (linear embed
//! plus learned positional offsets) and runs it through pre-norm blocks of
//! self-attention and a relu feed-forward. Learnable prompt tokens are
//! prepended to every example's grid; the classification readout is a mean
//! pool over all output tokens followed by a linear head. Prompt tokens can
//! be passed through a residual bottleneck MLP before use; the MLP exists
//! only during warm-up and its output is folded into the prompts at the end.
//!
//! All parameters live in a [`ParameterStore`] under fixed name prefixes:
//! `backbone.*`, `prompt.*`, and one prefix per head. Freezing the backbone
//! removes its entries from the flat trainable view, which is what makes
//! "no optimizer can touch it" a structural property instead of a runtime
//! promise.

use crate::data::Example;
use crate::error::Error;
use crate::rng;
use crate::tensor::{MhsaWeights, NodeId, ParameterStore, Tape, Tensor};
use crate::Result;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

/// Geometry of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    /// Width of the raw input feature vector.
    pub input_dim: usize,
    /// Token width D.
    pub embed_dim: usize,
    /// Number of attention/feed-forward blocks.
    pub depth: usize,
    /// Attention heads per block; must divide `embed_dim`.
    pub heads: usize,
    /// Tokens per example produced by the embed layer.
    pub token_len: usize,
}

impl BackboneConfig {
    /// Default desk-scale geometry for a given input width.
    pub fn new(input_dim: usize) -> Self {
        BackboneConfig { input_dim, embed_dim: 32, depth: 2, heads: 4, token_len: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.token_len == 0 {
            return Err(Error::InvalidConfig("backbone dimensions must be positive".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "heads {} must divide embed dim {}",
                self.heads, self.embed_dim
            )));
        }
        Ok(())
    }

    /// Feed-forward hidden width. Twice the token width keeps the
    /// feed-forward cost comparable to attention at these sizes.
    fn ffn_hidden(&self) -> usize {
        2 * self.embed_dim
    }
}

/// The embed-plus-blocks feature extractor.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    frozen: bool,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Backbone { config, frozen: false })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Inserts freshly initialized backbone parameters as trainable
    /// entries. Weights are small Gaussians; biases start at zero.
    pub fn init_params(&self, store: &mut ParameterStore, seed: u64) -> Result<()> {
        let c = &self.config;
        let mut rng = rng::stream(seed, "backbone-init");
        let normal = Normal::new(0.0, 0.02).expect("valid sigma");
        let mut gauss = |store: &mut ParameterStore, name: &str, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let v: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            store.insert(name, Tensor::from_vec(shape, v).unwrap(), true)
        };
        gauss(store, "backbone.embed.w", vec![c.input_dim, c.token_len * c.embed_dim])?;
        gauss(store, "backbone.embed.pos", vec![c.token_len, c.embed_dim])?;
        for i in 0..c.depth {
            for w in ["wq", "wk", "wv", "wo"] {
                gauss(store, &format!("backbone.block{i}.{w}"), vec![c.embed_dim, c.embed_dim])?;
            }
            for b in ["bq", "bk", "bv", "bo"] {
                store.insert(
                    &format!("backbone.block{i}.{b}"),
                    Tensor::zeros(vec![1, c.embed_dim]),
                    true,
                )?;
            }
            gauss(store, &format!("backbone.block{i}.ffn.w1"), vec![c.embed_dim, c.ffn_hidden()])?;
            store.insert(
                &format!("backbone.block{i}.ffn.b1"),
                Tensor::zeros(vec![1, c.ffn_hidden()]),
                true,
            )?;
            gauss(store, &format!("backbone.block{i}.ffn.w2"), vec![c.ffn_hidden(), c.embed_dim])?;
            store.insert(
                &format!("backbone.block{i}.ffn.b2"),
                Tensor::zeros(vec![1, c.embed_dim]),
                true,
            )?;
        }
        Ok(())
    }

    /// Freezes every backbone entry. From here on the backbone cannot
    /// appear in any flat view, gradient, or optimizer step.
    pub fn freeze(&mut self, store: &mut ParameterStore) {
        store.freeze_prefix("backbone.");
        self.frozen = true;
    }

    /// Maps a batch to its final token matrix `[B*(P+L), D]`, where P is
    /// the number of prepended prompt rows (0 without prompts). Returns the
    /// node and the per-example token count.
    pub fn forward_tokens(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        examples: &[Example],
        prompts: Option<NodeId>,
    ) -> Result<(NodeId, usize)> {
        let c = &self.config;
        let x = batch_features(examples, c.input_dim)?;
        let xn = tape.constant(x);
        let w = tape.leaf(store, "backbone.embed.w")?;
        let proj = tape.matmul(xn, w)?;
        let tokens = tape.reshape(proj, vec![examples.len() * c.token_len, c.embed_dim])?;
        let pos = tape.leaf(store, "backbone.embed.pos")?;
        let mut tokens = tape.add_tile(tokens, pos)?;
        let mut block_len = c.token_len;
        if let Some(p) = prompts {
            let (p_rows, p_cols) = tape.value(p).rows_cols()?;
            if p_cols != c.embed_dim {
                return Err(Error::ShapeMismatch {
                    op: "forward_tokens",
                    lhs: vec![p_rows, p_cols],
                    rhs: vec![c.token_len, c.embed_dim],
                });
            }
            tokens = tape.prepend_tile(p, tokens, c.token_len)?;
            block_len += p_rows;
        }
        for i in 0..c.depth {
            tokens = self.block(tape, store, i, tokens, block_len)?;
        }
        Ok((tokens, block_len))
    }

    fn block(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        index: usize,
        tokens: NodeId,
        block_len: usize,
    ) -> Result<NodeId> {
        let name = |part: &str| format!("backbone.block{index}.{part}");
        let w = MhsaWeights {
            wq: tape.leaf(store, &name("wq"))?,
            bq: tape.leaf(store, &name("bq"))?,
            wk: tape.leaf(store, &name("wk"))?,
            bk: tape.leaf(store, &name("bk"))?,
            wv: tape.leaf(store, &name("wv"))?,
            bv: tape.leaf(store, &name("bv"))?,
            wo: tape.leaf(store, &name("wo"))?,
            bo: tape.leaf(store, &name("bo"))?,
        };
        let ln1 = tape.layer_norm(tokens)?;
        let attn = tape.mhsa(ln1, w, self.config.heads, block_len)?;
        let tokens = tape.add(tokens, attn)?;

        let ln2 = tape.layer_norm(tokens)?;
        let w1 = tape.leaf(store, &name("ffn.w1"))?;
        let b1 = tape.leaf(store, &name("ffn.b1"))?;
        let w2 = tape.leaf(store, &name("ffn.w2"))?;
        let b2 = tape.leaf(store, &name("ffn.b2"))?;
        let h = tape.matmul(ln2, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let f = tape.matmul(h, w2)?;
        let f = tape.add_row(f, b2)?;
        tape.add(tokens, f)
    }
}

/// Where a prompt set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PromptProvenance {
    Random,
    IsaNaive,
    IsaSam,
    IsaFam,
}

impl PromptProvenance {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptProvenance::Random => "random",
            PromptProvenance::IsaNaive => "isa_naive",
            PromptProvenance::IsaSam => "isa_sam",
            PromptProvenance::IsaFam => "isa_fam",
        }
    }

    fn tag(self) -> u8 {
        match self {
            PromptProvenance::Random => 0,
            PromptProvenance::IsaNaive => 1,
            PromptProvenance::IsaSam => 2,
            PromptProvenance::IsaFam => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(PromptProvenance::Random),
            1 => Some(PromptProvenance::IsaNaive),
            2 => Some(PromptProvenance::IsaSam),
            3 => Some(PromptProvenance::IsaFam),
            _ => None,
        }
    }
}

impl fmt::Display for PromptProvenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Learnable prompt tokens, stored under `prompt.tokens`.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub prompt_len: usize,
    pub embed_dim: usize,
    pub provenance: PromptProvenance,
}

pub const PROMPT_PARAM: &str = "prompt.tokens";

impl PromptSet {
    pub const DEFAULT_LEN: usize = 4;

    /// Inserts uniformly initialized prompt tokens as a trainable entry.
    pub fn init_random(
        prompt_len: usize,
        embed_dim: usize,
        store: &mut ParameterStore,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = rng::stream(seed, "prompt-init");
        let v: Vec<f64> =
            (0..prompt_len * embed_dim).map(|_| rng.random_range(-0.1..0.1)).collect();
        store.insert(PROMPT_PARAM, Tensor::from_vec(vec![prompt_len, embed_dim], v)?, true)?;
        Ok(PromptSet { prompt_len, embed_dim, provenance: PromptProvenance::Random })
    }

    /// Installs externally produced prompt values (e.g. from a checkpoint).
    pub fn install(
        values: Tensor,
        provenance: PromptProvenance,
        store: &mut ParameterStore,
    ) -> Result<Self> {
        let (prompt_len, embed_dim) = values.rows_cols()?;
        store.insert(PROMPT_PARAM, values, true)?;
        Ok(PromptSet { prompt_len, embed_dim, provenance })
    }

    pub fn leaf(&self, tape: &mut Tape, store: &ParameterStore) -> Result<NodeId> {
        tape.leaf(store, PROMPT_PARAM)
    }

    pub fn values<'s>(&self, store: &'s ParameterStore) -> Result<&'s Tensor> {
        store.get(PROMPT_PARAM)
    }
}

/// Residual bottleneck over prompt tokens: `p + up(relu(norm(down(p))))`.
/// Down-projects by 8x (floored at one unit), normalizes and rectifies,
/// then projects back. Exists only during prompt warm-up.
#[derive(Debug, Clone)]
pub struct PromptAugmentMlp {
    pub embed_dim: usize,
    pub hidden: usize,
}

impl PromptAugmentMlp {
    pub fn new(embed_dim: usize) -> Self {
        PromptAugmentMlp { embed_dim, hidden: (embed_dim / 8).max(1) }
    }

    pub fn init_params(&self, store: &mut ParameterStore, seed: u64) -> Result<()> {
        let mut rng = rng::stream(seed, "paug-init");
        let normal = Normal::new(0.0, 0.02).expect("valid sigma");
        let mut gauss = |store: &mut ParameterStore, name: &str, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let v: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            store.insert(name, Tensor::from_vec(shape, v).unwrap(), true)
        };
        gauss(store, "paug.down.w", vec![self.embed_dim, self.hidden])?;
        store.insert("paug.down.b", Tensor::zeros(vec![1, self.hidden]), true)?;
        gauss(store, "paug.up.w", vec![self.hidden, self.embed_dim])?;
        store.insert("paug.up.b", Tensor::zeros(vec![1, self.embed_dim]), true)?;
        Ok(())
    }

    /// Applies the residual bottleneck to a `[P, D]` prompt node.
    pub fn augment(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        prompts: NodeId,
    ) -> Result<NodeId> {
        let dw = tape.leaf(store, "paug.down.w")?;
        let db = tape.leaf(store, "paug.down.b")?;
        let uw = tape.leaf(store, "paug.up.w")?;
        let ub = tape.leaf(store, "paug.up.b")?;
        let h = tape.matmul(prompts, dw)?;
        let h = tape.add_row(h, db)?;
        let h = tape.layer_norm(h)?;
        let h = tape.relu(h);
        let u = tape.matmul(h, uw)?;
        let u = tape.add_row(u, ub)?;
        tape.add(prompts, u)
    }
}

/// Linear readout `D -> classes` under its own name prefix, so a temporary
/// pretraining head and the stream head can coexist.
#[derive(Debug, Clone)]
pub struct OutputHead {
    pub prefix: String,
    pub classes: usize,
    pub embed_dim: usize,
}

impl OutputHead {
    pub fn new(prefix: &str, classes: usize, embed_dim: usize) -> Self {
        OutputHead { prefix: prefix.to_string(), classes, embed_dim }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn init_params(&self, store: &mut ParameterStore, seed: u64) -> Result<()> {
        let mut rng = rng::stream(seed, "head-init");
        let normal = Normal::new(0.0, 0.02).expect("valid sigma");
        let v: Vec<f64> =
            (0..self.embed_dim * self.classes).map(|_| normal.sample(&mut rng)).collect();
        store.insert(
            &self.weight_name(),
            Tensor::from_vec(vec![self.embed_dim, self.classes], v)?,
            true,
        )?;
        store.insert(&self.bias_name(), Tensor::zeros(vec![1, self.classes]), true)?;
        Ok(())
    }

    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        pooled: NodeId,
    ) -> Result<NodeId> {
        let w = tape.leaf(store, &self.weight_name())?;
        let b = tape.leaf(store, &self.bias_name())?;
        let z = tape.matmul(pooled, w)?;
        tape.add_row(z, b)
    }
}

/// Full forward pass: embed, optional prompt prepend, blocks, mean pool
/// over every output token, linear head. Returns `[B, classes]` logits.
pub fn forward(
    tape: &mut Tape,
    store: &ParameterStore,
    backbone: &Backbone,
    prompts: Option<NodeId>,
    head: &OutputHead,
    examples: &[Example],
) -> Result<NodeId> {
    let (tokens, block_len) = backbone.forward_tokens(tape, store, examples, prompts)?;
    let pooled = tape.mean_pool_blocks(tokens, block_len)?;
    head.logits(tape, store, pooled)
}

/// Argmax predictions over all classes. Inference applies no mask: the
/// scores compete across the entire label space.
pub fn predict(
    store: &ParameterStore,
    backbone: &Backbone,
    prompts: Option<&PromptSet>,
    head: &OutputHead,
    examples: &[Example],
) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let p = match prompts {
        Some(set) => Some(set.leaf(&mut tape, store)?),
        None => None,
    };
    let logits = forward(&mut tape, store, backbone, p, head, examples)?;
    let t = tape.value(logits);
    let (b, n) = t.rows_cols()?;
    let mut out = Vec::with_capacity(b);
    for r in 0..b {
        let row = &t.values()[r * n..(r + 1) * n];
        let mut best = 0;
        for (j, v) in row.iter().enumerate().skip(1) {
            if *v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

fn batch_features(examples: &[Example], input_dim: usize) -> Result<Tensor> {
    if examples.is_empty() {
        return Err(Error::InvalidDataset("empty batch".into()));
    }
    let mut values = Vec::with_capacity(examples.len() * input_dim);
    for (i, e) in examples.iter().enumerate() {
        if e.features.len() != input_dim {
            return Err(Error::InvalidDataset(format!(
                "example {i} has {} features, model expects {input_dim}",
                e.features.len()
            )));
        }
        values.extend_from_slice(&e.features);
    }
    Tensor::from_vec(vec![examples.len(), input_dim], values)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"GCLP";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes finalized prompt values: magic, version, shape, provenance tag,
/// then the raw little-endian values. Round-trips bit-exactly.
pub fn save_prompt_checkpoint(
    path: &Path,
    prompts: &Tensor,
    provenance: PromptProvenance,
) -> Result<()> {
    let (rows, cols) = prompts.rows_cols()?;
    let mut buf =
        Vec::with_capacity(4 + 4 + 4 + 4 + 1 + prompts.len() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    buf.push(provenance.tag());
    for v in prompts.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Reads a prompt checkpoint back, validating magic, version, element
/// count, and finiteness.
pub fn load_prompt_checkpoint(path: &Path) -> Result<(Tensor, PromptProvenance)> {
    let bad = |reason: &str| Error::BadCheckpoint {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    if bytes.len() < 17 {
        return Err(bad("truncated header"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let provenance =
        PromptProvenance::from_tag(bytes[16]).ok_or_else(|| bad("unknown provenance tag"))?;
    let body = &bytes[17..];
    if body.len() != rows * cols * 8 {
        return Err(bad(&format!(
            "expected {} value bytes, found {}",
            rows * cols * 8,
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite prompt value"));
    }
    Ok((Tensor::from_vec(vec![rows, cols], values)?, provenance))
}
