//! Flat parameter store and the four toy model topologies built on it.
//!
//! Every trainable (or frozen) array lives in `ToyModel::params`; blocks
//! reference parameters by index. Gradients are a parallel `Grads` vector
//! with slots only for unfrozen tensors, so frozen backbones can never
//! accumulate updates by construction.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::blocks::{Block, BlockCache};
use super::ToygradError;
use crate::Matrix;

/// Named parameter array. `frozen` tensors are loaded/saved but never
/// updated by the optimizer and never receive gradient slots.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub name: String,
    pub value: Matrix,
    pub frozen: bool,
}

/// Gradient accumulator parallel to `ToyModel::params`. Frozen parameters
/// have no slot; accumulating into them is a silent no-op, which is what
/// lets one backward pass serve both full and adapter-only training.
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<Option<Matrix>>,
}

impl Grads {
    /// Zero gradients for every unfrozen parameter of `model`.
    pub fn zeros_for(model: &ToyModel) -> Self {
        let slots = model
            .params
            .iter()
            .map(|p| {
                if p.frozen {
                    None
                } else {
                    Some(Matrix::zeros(p.value.rows(), p.value.cols()))
                }
            })
            .collect();
        Self { slots }
    }

    /// Whether gradients are being collected for parameter `ix` (lets
    /// blocks skip computing products that would be thrown away).
    pub fn tracked(&self, ix: usize) -> bool {
        self.slots[ix].is_some()
    }

    /// Adds `delta` into slot `ix`; no-op when the parameter is frozen.
    pub fn accumulate(&mut self, ix: usize, delta: &Matrix) {
        if let Some(slot) = &mut self.slots[ix] {
            assert_eq!(
                (slot.rows(), slot.cols()),
                (delta.rows(), delta.cols()),
                "gradient shape mismatch for parameter {ix}"
            );
            for (d, s) in slot.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                *d += *s;
            }
        }
    }

    pub fn get(&self, ix: usize) -> Option<&Matrix> {
        self.slots[ix].as_ref()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Scales every tracked gradient by `s` (micro-batch averaging).
    pub fn scale(&mut self, s: f64) {
        for slot in self.slots.iter_mut().flatten() {
            for v in slot.as_mut_slice() {
                *v *= s;
            }
        }
    }

    /// Adds another accumulator with identical layout.
    pub fn add(&mut self, other: &Grads) {
        assert_eq!(self.slots.len(), other.slots.len(), "gradient layout mismatch");
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            match (dst, src) {
                (Some(d), Some(s)) => {
                    for (a, b) in d.as_mut_slice().iter_mut().zip(s.as_slice()) {
                        *a += *b;
                    }
                }
                (None, None) => {}
                _ => panic!("gradient layout mismatch"),
            }
        }
    }

    /// Largest absolute gradient entry (diagnostics).
    pub fn max_abs(&self) -> f64 {
        self.slots.iter().flatten().map(|m| m.max_abs()).fold(0.0, f64::max)
    }
}

/// Target-side shape of a forward pass: activations are `(batch*len) x dim`
/// with row `b*len + t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchShape {
    pub batch: usize,
    pub len: usize,
}

impl BatchShape {
    pub fn rows(&self) -> usize {
        self.batch * self.len
    }
}

/// Borrowed cross-attention context: encoder hidden states plus their
/// per-sequence length (`hidden` is `(batch*len) x dim`).
#[derive(Debug, Clone, Copy)]
pub struct CtxView<'a> {
    pub hidden: &'a Matrix,
    pub len: usize,
}

/// Which topology a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Small masked-LM that proposes replacement tokens.
    Generator,
    /// Replaced-token-detection model with an auxiliary LM head.
    Discriminator,
    /// Frozen-backbone encoder with trainable feed-forward adapters.
    Encoder,
    /// Frozen-backbone decoder with trainable cross-attention adapters and
    /// a trainable output head.
    Decoder,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Generator => "generator",
            ModelKind::Discriminator => "discriminator",
            ModelKind::Encoder => "encoder",
            ModelKind::Decoder => "decoder",
        }
    }
}

/// Hyperparameters shared by all four topologies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Number of real data tokens; the embedding table holds one extra row
    /// for the mask sentinel.
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub max_len: usize,
    /// Hidden width of backbone feed-forwards and adapter bottlenecks.
    pub hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Token id reserved for masked positions.
    pub fn mask_id(&self) -> u16 {
        self.vocab as u16
    }

    /// Rows of the embedding table (data vocabulary plus the mask row).
    pub fn table_rows(&self) -> usize {
        self.vocab + 1
    }
}

/// A toy model: flat parameters, a trunk of blocks, and named heads that
/// each read the trunk output.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
    pub trunk: Vec<Block>,
    pub heads: Vec<(String, Block)>,
}

/// Everything needed to run the backward pass of one forward call.
#[derive(Debug)]
pub struct Tape {
    pub shape: BatchShape,
    trunk: Vec<BlockCache>,
    /// `(head index, cache)` for each head evaluated on this tape.
    heads: Vec<(usize, BlockCache)>,
    used_ctx: bool,
}

struct Builder {
    params: Vec<Tensor>,
    rng: ChaCha20Rng,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self { params: Vec::new(), rng: super::data::derive_rng(seed, 0, 0) }
    }

    /// Standard normal via Box-Muller, scaled by `std`.
    fn normal(&mut self, std: f64) -> f64 {
        let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std
    }

    fn push(&mut self, name: String, value: Matrix, frozen: bool) -> usize {
        self.params.push(Tensor { name, value, frozen });
        self.params.len() - 1
    }

    fn gaussian(&mut self, name: String, rows: usize, cols: usize, std: f64, frozen: bool) -> usize {
        let data: Vec<f64> = (0..rows * cols).map(|_| self.normal(std)).collect();
        let value = Matrix::from_vec(rows, cols, data).expect("init produced finite values");
        self.push(name, value, frozen)
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize, frozen: bool) -> usize {
        self.push(name, Matrix::zeros(rows, cols), frozen)
    }

    fn ones(&mut self, name: String, rows: usize, cols: usize, frozen: bool) -> usize {
        self.push(name, Matrix::from_fn(rows, cols, |_, _| 1.0), frozen)
    }

    fn embedding(&mut self, cfg: &ModelConfig, frozen: bool) -> Block {
        let tok = self.gaussian("emb.tok".into(), cfg.table_rows(), cfg.dim, 0.5, frozen);
        let pos = self.gaussian("emb.pos".into(), cfg.max_len, cfg.dim, 0.5, frozen);
        Block::Embedding { tok, pos }
    }

    fn dense(&mut self, prefix: &str, din: usize, dout: usize, gelu: bool, frozen: bool) -> Block {
        let std = 1.0 / (din as f64).sqrt();
        let w = self.gaussian(format!("{prefix}.w"), din, dout, std, frozen);
        let b = self.zeros(format!("{prefix}.b"), 1, dout, frozen);
        Block::Dense { w, b, gelu }
    }

    fn layer_norm(&mut self, prefix: &str, dim: usize, frozen: bool) -> Block {
        let gamma = self.ones(format!("{prefix}.g"), 1, dim, frozen);
        let beta = self.zeros(format!("{prefix}.b"), 1, dim, frozen);
        Block::LayerNorm { gamma, beta }
    }

    /// Residual position-mixing matrix with a small random start so the
    /// mixing path is live from the first step.
    fn token_mix(&mut self, prefix: &str, max_len: usize, frozen: bool) -> Block {
        let std = 0.3 / (max_len as f64).sqrt();
        let m = self.gaussian(format!("{prefix}.m"), max_len, max_len, std, frozen);
        Block::TokenMix { m }
    }

    /// Residual feed-forward adapter; the output projection starts at zero
    /// so a fresh adapter is an exact identity mapping.
    fn ff_adapter(&mut self, prefix: &str, dim: usize, hidden: usize) -> Block {
        let std = 1.0 / (dim as f64).sqrt();
        let ln_gamma = self.ones(format!("{prefix}.ln.g"), 1, dim, false);
        let ln_beta = self.zeros(format!("{prefix}.ln.b"), 1, dim, false);
        let w1 = self.gaussian(format!("{prefix}.w1"), dim, hidden, std, false);
        let b1 = self.zeros(format!("{prefix}.b1"), 1, hidden, false);
        let w2 = self.zeros(format!("{prefix}.w2"), hidden, dim, false);
        let b2 = self.zeros(format!("{prefix}.b2"), 1, dim, false);
        Block::FfAdapter { ln_gamma, ln_beta, w1, b1, w2, b2 }
    }

    /// Residual cross-attention adapter; the output projection starts at
    /// zero so a fresh adapter is an exact identity mapping.
    fn cross_attn_adapter(&mut self, prefix: &str, dim: usize) -> Block {
        let std = 1.0 / (dim as f64).sqrt();
        let ln_gamma = self.ones(format!("{prefix}.ln.g"), 1, dim, false);
        let ln_beta = self.zeros(format!("{prefix}.ln.b"), 1, dim, false);
        let wq = self.gaussian(format!("{prefix}.wq"), dim, dim, std, false);
        let wk = self.gaussian(format!("{prefix}.wk"), dim, dim, std, false);
        let wv = self.gaussian(format!("{prefix}.wv"), dim, dim, std, false);
        let wo = self.zeros(format!("{prefix}.wo"), dim, dim, false);
        Block::CrossAttnAdapter { ln_gamma, ln_beta, wq, wk, wv, wo }
    }

    fn vocab_head(&mut self, cfg: &ModelConfig) -> Block {
        let std = 1.0 / (cfg.dim as f64).sqrt();
        let w = self.gaussian("head.vocab.w".into(), cfg.dim, cfg.table_rows(), std, false);
        let b = self.zeros("head.vocab.b".into(), 1, cfg.table_rows(), false);
        Block::VocabHead { w, b }
    }

    fn rtd_head(&mut self, cfg: &ModelConfig) -> Block {
        let std = 1.0 / (cfg.dim as f64).sqrt();
        let w = self.gaussian("head.rtd.w".into(), cfg.dim, 1, std, false);
        let b = self.zeros("head.rtd.b".into(), 1, 1, false);
        Block::RtdHead { w, b }
    }
}

impl ToyModel {
    /// Builds the topology selected by `cfg.kind` with seeded initialization.
    pub fn new(cfg: ModelConfig) -> Self {
        assert!(
            cfg.vocab >= 2 && cfg.dim >= 2 && cfg.max_len >= 1 && cfg.hidden >= 1,
            "degenerate model config"
        );
        let mut b = Builder::new(cfg.seed);
        let mut trunk = Vec::new();
        let mut heads = Vec::new();
        match cfg.kind {
            ModelKind::Generator => {
                trunk.push(b.embedding(&cfg, false));
                for l in 0..cfg.layers {
                    trunk.push(b.token_mix(&format!("l{l}.mix"), cfg.max_len, false));
                    trunk.push(b.dense(&format!("l{l}.ff"), cfg.dim, cfg.hidden, true, false));
                    trunk.push(b.dense(&format!("l{l}.proj"), cfg.hidden, cfg.dim, false, false));
                    trunk.push(b.layer_norm(&format!("l{l}.ln"), cfg.dim, false));
                }
                heads.push(("vocab".to_string(), b.vocab_head(&cfg)));
            }
            ModelKind::Discriminator => {
                trunk.push(b.embedding(&cfg, false));
                for l in 0..cfg.layers {
                    trunk.push(b.token_mix(&format!("l{l}.mix"), cfg.max_len, false));
                    trunk.push(b.dense(&format!("l{l}.ff"), cfg.dim, cfg.hidden, true, false));
                    trunk.push(b.dense(&format!("l{l}.proj"), cfg.hidden, cfg.dim, false, false));
                    trunk.push(b.layer_norm(&format!("l{l}.ln"), cfg.dim, false));
                }
                heads.push(("rtd".to_string(), b.rtd_head(&cfg)));
                heads.push(("clm".to_string(), b.vocab_head(&cfg)));
            }
            ModelKind::Encoder => {
                trunk.push(b.embedding(&cfg, true));
                for l in 0..cfg.layers {
                    trunk.push(b.dense(&format!("l{l}.ff"), cfg.dim, cfg.hidden, true, true));
                    trunk.push(b.dense(&format!("l{l}.proj"), cfg.hidden, cfg.dim, false, true));
                    trunk.push(b.layer_norm(&format!("l{l}.ln"), cfg.dim, true));
                    trunk.push(b.ff_adapter(&format!("l{l}.adapter"), cfg.dim, cfg.hidden));
                }
            }
            ModelKind::Decoder => {
                trunk.push(b.embedding(&cfg, true));
                for l in 0..cfg.layers {
                    trunk.push(b.dense(&format!("l{l}.ff"), cfg.dim, cfg.hidden, true, true));
                    trunk.push(b.dense(&format!("l{l}.proj"), cfg.hidden, cfg.dim, false, true));
                    trunk.push(b.layer_norm(&format!("l{l}.ln"), cfg.dim, true));
                    trunk.push(b.cross_attn_adapter(&format!("l{l}.xattn"), cfg.dim));
                }
                heads.push(("vocab".to_string(), b.vocab_head(&cfg)));
            }
        }
        Self { config: cfg, params: b.params, trunk, heads }
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).count()
    }

    /// Total scalar count across trainable tensors.
    pub fn trainable_elements(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.len())
            .sum()
    }

    /// One-line structural descriptor; checkpoints must match it exactly.
    pub fn topology_descriptor(&self) -> String {
        let c = &self.config;
        format!(
            "{} vocab={} dim={} layers={} max_len={} hidden={} params={}",
            c.kind.name(),
            c.vocab,
            c.dim,
            c.layers,
            c.max_len,
            c.hidden,
            self.params.len()
        )
    }

    fn validate_ids(&self, ids: &[u16], shape: BatchShape) -> Result<(), ToygradError> {
        if shape.batch == 0 || shape.len == 0 || ids.len() != shape.rows() {
            return Err(ToygradError::BadBatchShape {
                ids: ids.len(),
                batch: shape.batch,
                len: shape.len,
            });
        }
        if shape.len > self.config.max_len {
            return Err(ToygradError::TooLong { len: shape.len, max: self.config.max_len });
        }
        let rows = self.config.table_rows() as u16;
        if let Some(&bad) = ids.iter().find(|&&t| t >= rows) {
            return Err(ToygradError::BadTokenId { id: bad, vocab: self.config.vocab });
        }
        Ok(())
    }

    /// Runs the trunk over token ids, returning the hidden states and the
    /// tape for the backward pass. `ctx` feeds cross-attention adapters;
    /// models without them ignore it.
    pub fn forward_trunk(
        &self,
        ids: &[u16],
        shape: BatchShape,
        ctx: Option<CtxView<'_>>,
    ) -> Result<(Matrix, Tape), ToygradError> {
        self.validate_ids(ids, shape)?;
        if let Some(c) = ctx {
            if c.len == 0 || c.hidden.rows() != shape.batch * c.len {
                return Err(ToygradError::BadContextShape {
                    rows: c.hidden.rows(),
                    batch: shape.batch,
                    len: c.len,
                });
            }
            if c.hidden.cols() != self.config.dim {
                return Err(ToygradError::BadContextShape {
                    rows: c.hidden.cols(),
                    batch: shape.batch,
                    len: c.len,
                });
            }
        }
        let mut caches = Vec::with_capacity(self.trunk.len());
        let first = self.trunk.first().expect("trunk starts with an embedding");
        let (mut x, cache) = first.forward_ids(&self.params, ids, shape);
        caches.push(cache);
        for block in &self.trunk[1..] {
            let (y, cache) = block.forward_act(&self.params, &x, shape, ctx);
            caches.push(cache);
            x = y;
        }
        Ok((
            x,
            Tape { shape, trunk: caches, heads: Vec::new(), used_ctx: ctx.is_some() },
        ))
    }

    /// Applies the named head to trunk output, recording its cache on the
    /// tape. Returns the head output (logits).
    pub fn forward_head(
        &self,
        name: &str,
        hidden: &Matrix,
        tape: &mut Tape,
    ) -> Result<Matrix, ToygradError> {
        let (ix, (_, block)) = self
            .heads
            .iter()
            .enumerate()
            .find(|(_, (n, _))| n == name)
            .ok_or_else(|| ToygradError::NoSuchHead { name: name.to_string() })?;
        let (out, cache) = block.forward_act(&self.params, hidden, tape.shape, None);
        tape.heads.push((ix, cache));
        Ok(out)
    }

    /// Backpropagates head gradients (`d_heads`, in the order the heads
    /// were evaluated on this tape) plus an optional direct gradient on the
    /// trunk output. Returns the gradient w.r.t. the cross-attention
    /// context when one was used.
    pub fn backward(
        &self,
        tape: &Tape,
        d_heads: &[&Matrix],
        d_hidden_direct: Option<&Matrix>,
        grads: &mut Grads,
    ) -> Option<Matrix> {
        assert_eq!(
            d_heads.len(),
            tape.heads.len(),
            "one output gradient per evaluated head"
        );
        assert_eq!(grads.len(), self.params.len(), "gradient layout mismatch");
        let rows = tape.shape.rows();
        let mut d_hidden = Matrix::zeros(rows, self.config.dim);
        if let Some(d) = d_hidden_direct {
            d_hidden.as_mut_slice().copy_from_slice(d.as_slice());
        }
        for ((head_ix, cache), d_out) in tape.heads.iter().zip(d_heads) {
            let block = &self.heads[*head_ix].1;
            let d_in = block.backward(&self.params, cache, d_out, grads, &mut None);
            for (a, b) in d_hidden.as_mut_slice().iter_mut().zip(d_in.as_slice()) {
                *a += *b;
            }
        }
        let mut d_ctx = if tape.used_ctx {
            let ctx_rows = self
                .trunk
                .iter()
                .zip(&tape.trunk)
                .find_map(|(b, c)| b.ctx_rows_of(c))
                .unwrap_or(0);
            Some(Matrix::zeros(ctx_rows, self.config.dim))
        } else {
            None
        };
        let mut d_x = d_hidden;
        for (block, cache) in self.trunk.iter().zip(&tape.trunk).skip(1).rev() {
            d_x = block.backward(&self.params, cache, &d_x, grads, &mut d_ctx);
        }
        let first = &self.trunk[0];
        first.backward(&self.params, &tape.trunk[0], &d_x, grads, &mut None);
        d_ctx
    }
}
