//! Differentiable building blocks with hand-written backward passes.
//!
//! Each block reads its parameters from the model's flat store by index,
//! returns a cache of whatever the backward pass needs, and accumulates
//! parameter gradients into a [`Grads`] — skipping any tensor without a
//! gradient slot (frozen), and skipping the matching matrix products too.

use super::model::{BatchShape, CtxView, Grads, Tensor};
use crate::Matrix;

/// tanh-based GeLU approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let t = (C * (x + A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

const LN_EPS: f64 = 1e-5;

fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    a.transpose().matmul(b)
}

fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    a.matmul(&b.transpose())
}

fn add_bias(x: &mut Matrix, bias: &Matrix) {
    let cols = x.cols();
    debug_assert_eq!(bias.rows(), 1);
    debug_assert_eq!(bias.cols(), cols);
    let b = bias.as_slice();
    for row in 0..x.rows() {
        let r = x.row_mut(row);
        for (v, add) in r.iter_mut().zip(b) {
            *v += *add;
        }
    }
}

fn col_sums(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, x.cols());
    for row in 0..x.rows() {
        let r = x.row(row);
        let o = out.as_mut_slice();
        for (acc, v) in o.iter_mut().zip(r) {
            *acc += *v;
        }
    }
    out
}

fn add_into(dst: &mut Matrix, src: &Matrix) {
    for (a, b) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *a += *b;
    }
}

/// Row-wise layer norm forward: returns `(y, xhat, inv_std)`.
fn ln_forward(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
    let (rows, cols) = (x.rows(), x.cols());
    let mut y = Matrix::zeros(rows, cols);
    let mut xhat = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    let g = gamma.as_slice();
    let be = beta.as_slice();
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        let xh = xhat.row_mut(r);
        for (j, v) in xr.iter().enumerate() {
            xh[j] = (v - mean) * inv;
        }
        let yr = y.row_mut(r);
        let xh = xhat.row(r);
        for j in 0..cols {
            yr[j] = g[j] * xh[j] + be[j];
        }
    }
    (y, xhat, inv_std)
}

/// Row-wise layer norm backward; accumulates `dgamma`/`dbeta` and returns `dx`.
fn ln_backward(
    dy: &Matrix,
    xhat: &Matrix,
    inv_std: &[f64],
    gamma: &Matrix,
    gamma_ix: usize,
    beta_ix: usize,
    grads: &mut Grads,
) -> Matrix {
    let (rows, cols) = (dy.rows(), dy.cols());
    let g = gamma.as_slice();
    if grads.tracked(gamma_ix) {
        let mut dgamma = Matrix::zeros(1, cols);
        for r in 0..rows {
            let dyr = dy.row(r);
            let xh = xhat.row(r);
            let dg = dgamma.as_mut_slice();
            for j in 0..cols {
                dg[j] += dyr[j] * xh[j];
            }
        }
        grads.accumulate(gamma_ix, &dgamma);
    }
    if grads.tracked(beta_ix) {
        grads.accumulate(beta_ix, &col_sums(dy));
    }
    let mut dx = Matrix::zeros(rows, cols);
    let n = cols as f64;
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = xhat.row(r);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..cols {
            let dxh = dyr[j] * g[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[j];
        }
        let inv = inv_std[r];
        let dxr = dx.row_mut(r);
        for j in 0..cols {
            let dxh = dyr[j] * g[j];
            dxr[j] = inv * (dxh - sum_dxhat / n - xh[j] * sum_dxhat_xhat / n);
        }
    }
    dx
}

/// A layer in the trunk or a head. Fields are indices into the model's
/// flat parameter store.
#[derive(Debug, Clone)]
pub enum Block {
    /// Token + learned positional embedding lookup.
    Embedding { tok: usize, pos: usize },
    /// Affine map with optional GeLU: `y = act(x W + b)`.
    Dense { w: usize, b: usize, gelu: bool },
    /// Row-wise layer normalization with learned scale and shift.
    LayerNorm { gamma: usize, beta: usize },
    /// Residual bottleneck adapter: `y = x + W2 gelu(W1 LN(x) + b1) + b2`.
    FfAdapter { ln_gamma: usize, ln_beta: usize, w1: usize, b1: usize, w2: usize, b2: usize },
    /// Residual single-head cross-attention over an external context:
    /// `y = x + softmax(q k^T / sqrt(d)) v Wo` with `q` from `LN(x)` and
    /// `k`, `v` from the context.
    CrossAttnAdapter {
        ln_gamma: usize,
        ln_beta: usize,
        wq: usize,
        wk: usize,
        wv: usize,
        wo: usize,
    },
    /// Residual position mixing within each sequence, applied to every
    /// feature channel: `y[b,i,:] = x[b,i,:] + sum_j M[i,j] x[b,j,:]`.
    /// `M` is `max_len x max_len`; shorter sequences use the leading
    /// submatrix. Starts at zero, i.e. the identity mapping.
    TokenMix { m: usize },
    /// Linear projection to vocabulary logits.
    VocabHead { w: usize, b: usize },
    /// Linear projection to a single replaced-token logit per position.
    RtdHead { w: usize, b: usize },
}

/// Forward-pass values a block needs to run its backward pass.
#[derive(Debug, Clone)]
pub enum BlockCache {
    Embedding {
        ids: Vec<u16>,
        len: usize,
    },
    Dense {
        input: Matrix,
        /// Pre-activation, cached only when the block applies GeLU.
        pre: Option<Matrix>,
    },
    LayerNorm {
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    FfAdapter {
        xhat: Matrix,
        inv_std: Vec<f64>,
        ln_out: Matrix,
        pre: Matrix,
        hidden_act: Matrix,
    },
    CrossAttnAdapter {
        xhat: Matrix,
        inv_std: Vec<f64>,
        ln_out: Matrix,
        q: Matrix,
        k: Matrix,
        v: Matrix,
        /// Stacked per-sequence attention rows, `(batch*tgt_len) x src_len`.
        attn: Matrix,
        attn_out: Matrix,
        ctx: Matrix,
        ctx_len: usize,
    },
    Linear {
        input: Matrix,
    },
    TokenMix {
        input: Matrix,
        len: usize,
    },
}

impl Block {
    /// Embedding lookup; only valid for `Block::Embedding` (the first
    /// trunk block by construction).
    pub fn forward_ids(
        &self,
        params: &[Tensor],
        ids: &[u16],
        shape: BatchShape,
    ) -> (Matrix, BlockCache) {
        let Block::Embedding { tok, pos } = self else {
            panic!("forward_ids called on a non-embedding block");
        };
        let tok_t = &params[*tok].value;
        let pos_t = &params[*pos].value;
        let dim = tok_t.cols();
        let mut x = Matrix::zeros(shape.rows(), dim);
        for (r, &id) in ids.iter().enumerate() {
            let t = r % shape.len;
            let xr = x.row_mut(r);
            let tr = tok_t.row(id as usize);
            let pr = pos_t.row(t);
            for j in 0..dim {
                xr[j] = tr[j] + pr[j];
            }
        }
        (x, BlockCache::Embedding { ids: ids.to_vec(), len: shape.len })
    }

    /// Forward over activations; panics on `Block::Embedding`.
    pub fn forward_act(
        &self,
        params: &[Tensor],
        x: &Matrix,
        shape: BatchShape,
        ctx: Option<CtxView<'_>>,
    ) -> (Matrix, BlockCache) {
        match self {
            Block::Embedding { .. } => panic!("embedding blocks take token ids"),
            Block::Dense { w, b, gelu: act } => {
                let mut pre = x.matmul(&params[*w].value);
                add_bias(&mut pre, &params[*b].value);
                if *act {
                    let out = pre.map(|v| gelu(v));
                    (out, BlockCache::Dense { input: x.clone(), pre: Some(pre) })
                } else {
                    (pre, BlockCache::Dense { input: x.clone(), pre: None })
                }
            }
            Block::LayerNorm { gamma, beta } => {
                let (y, xhat, inv_std) =
                    ln_forward(x, &params[*gamma].value, &params[*beta].value);
                (y, BlockCache::LayerNorm { xhat, inv_std })
            }
            Block::FfAdapter { ln_gamma, ln_beta, w1, b1, w2, b2 } => {
                let (ln_out, xhat, inv_std) =
                    ln_forward(x, &params[*ln_gamma].value, &params[*ln_beta].value);
                let mut pre = ln_out.matmul(&params[*w1].value);
                add_bias(&mut pre, &params[*b1].value);
                let hidden_act = pre.map(|v| gelu(v));
                let mut delta = hidden_act.matmul(&params[*w2].value);
                add_bias(&mut delta, &params[*b2].value);
                let mut out = x.clone();
                add_into(&mut out, &delta);
                (
                    out,
                    BlockCache::FfAdapter { xhat, inv_std, ln_out, pre, hidden_act },
                )
            }
            Block::CrossAttnAdapter { ln_gamma, ln_beta, wq, wk, wv, wo } => {
                let ctx = ctx.expect("cross-attention requires an encoder context");
                let (ln_out, xhat, inv_std) =
                    ln_forward(x, &params[*ln_gamma].value, &params[*ln_beta].value);
                let q = ln_out.matmul(&params[*wq].value);
                let k = ctx.hidden.matmul(&params[*wk].value);
                let v = ctx.hidden.matmul(&params[*wv].value);
                let dim = q.cols();
                let scale = 1.0 / (dim as f64).sqrt();
                let (tgt_len, src_len) = (shape.len, ctx.len);
                let mut attn = Matrix::zeros(shape.rows(), src_len);
                let mut attn_out = Matrix::zeros(shape.rows(), dim);
                for b in 0..shape.batch {
                    for i in 0..tgt_len {
                        let r = b * tgt_len + i;
                        let qr = q.row(r);
                        // Scores, then a numerically stable row softmax.
                        let ar = attn.row_mut(r);
                        let mut max = f64::NEG_INFINITY;
                        for j in 0..src_len {
                            let kr = k.row(b * src_len + j);
                            let s: f64 =
                                qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale;
                            ar[j] = s;
                            max = max.max(s);
                        }
                        let mut total = 0.0;
                        for a in ar.iter_mut() {
                            *a = (*a - max).exp();
                            total += *a;
                        }
                        for a in ar.iter_mut() {
                            *a /= total;
                        }
                        let ar = attn.row(r);
                        let or = attn_out.row_mut(r);
                        for j in 0..src_len {
                            let vr = v.row(b * src_len + j);
                            let a = ar[j];
                            for d in 0..dim {
                                or[d] += a * vr[d];
                            }
                        }
                    }
                }
                let delta = attn_out.matmul(&params[*wo].value);
                let mut out = x.clone();
                add_into(&mut out, &delta);
                (
                    out,
                    BlockCache::CrossAttnAdapter {
                        xhat,
                        inv_std,
                        ln_out,
                        q,
                        k,
                        v,
                        attn,
                        attn_out,
                        ctx: ctx.hidden.clone(),
                        ctx_len: ctx.len,
                    },
                )
            }
            Block::VocabHead { w, b } | Block::RtdHead { w, b } => {
                let mut out = x.matmul(&params[*w].value);
                add_bias(&mut out, &params[*b].value);
                (out, BlockCache::Linear { input: x.clone() })
            }
            Block::TokenMix { m } => {
                let mix = &params[*m].value;
                let len = shape.len;
                let dim = x.cols();
                let mut out = x.clone();
                for b in 0..shape.batch {
                    for i in 0..len {
                        let or = b * len + i;
                        for j in 0..len {
                            let w = mix[(i, j)];
                            if w == 0.0 {
                                continue;
                            }
                            let src = b * len + j;
                            for d in 0..dim {
                                let v = x[(src, d)] * w;
                                out[(or, d)] += v;
                            }
                        }
                    }
                }
                (out, BlockCache::TokenMix { input: x.clone(), len })
            }
        }
    }

    /// Rows of the cross-attention context recorded in `cache`, if this
    /// block attends to one.
    pub fn ctx_rows_of(&self, cache: &BlockCache) -> Option<usize> {
        match (self, cache) {
            (Block::CrossAttnAdapter { .. }, BlockCache::CrossAttnAdapter { ctx, .. }) => {
                Some(ctx.rows())
            }
            _ => None,
        }
    }

    /// Backward pass: accumulates parameter gradients and returns the
    /// gradient w.r.t. the block input. Cross-attention additionally adds
    /// its context gradient into `d_ctx`.
    pub fn backward(
        &self,
        params: &[Tensor],
        cache: &BlockCache,
        d_out: &Matrix,
        grads: &mut Grads,
        d_ctx: &mut Option<Matrix>,
    ) -> Matrix {
        match (self, cache) {
            (Block::Embedding { tok, pos }, BlockCache::Embedding { ids, len }) => {
                if grads.tracked(*tok) {
                    let table = &params[*tok].value;
                    let mut dtok = Matrix::zeros(table.rows(), table.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        let dr = d_out.row(r);
                        let tr = dtok.row_mut(id as usize);
                        for (a, b) in tr.iter_mut().zip(dr) {
                            *a += *b;
                        }
                    }
                    grads.accumulate(*tok, &dtok);
                }
                if grads.tracked(*pos) {
                    let table = &params[*pos].value;
                    let mut dpos = Matrix::zeros(table.rows(), table.cols());
                    for r in 0..ids.len() {
                        let t = r % len;
                        let dr = d_out.row(r);
                        let pr = dpos.row_mut(t);
                        for (a, b) in pr.iter_mut().zip(dr) {
                            *a += *b;
                        }
                    }
                    grads.accumulate(*pos, &dpos);
                }
                // No input gradient: embeddings are the bottom of the stack.
                Matrix::zeros(1, 1)
            }
            (Block::Dense { w, b, .. }, BlockCache::Dense { input, pre }) => {
                let d_pre = match pre {
                    Some(p) => {
                        let mut d = d_out.clone();
                        for (dv, pv) in d.as_mut_slice().iter_mut().zip(p.as_slice()) {
                            *dv *= gelu_prime(*pv);
                        }
                        d
                    }
                    None => d_out.clone(),
                };
                if grads.tracked(*w) {
                    grads.accumulate(*w, &matmul_tn(input, &d_pre));
                }
                if grads.tracked(*b) {
                    grads.accumulate(*b, &col_sums(&d_pre));
                }
                matmul_nt(&d_pre, &params[*w].value)
            }
            (Block::LayerNorm { gamma, beta }, BlockCache::LayerNorm { xhat, inv_std }) => {
                ln_backward(d_out, xhat, inv_std, &params[*gamma].value, *gamma, *beta, grads)
            }
            (
                Block::FfAdapter { ln_gamma, ln_beta, w1, b1, w2, b2 },
                BlockCache::FfAdapter { xhat, inv_std, ln_out, pre, hidden_act },
            ) => {
                // Residual branch.
                let mut dx = d_out.clone();
                // Output projection.
                if grads.tracked(*w2) {
                    grads.accumulate(*w2, &matmul_tn(hidden_act, d_out));
                }
                if grads.tracked(*b2) {
                    grads.accumulate(*b2, &col_sums(d_out));
                }
                let mut d_pre = matmul_nt(d_out, &params[*w2].value);
                for (dv, pv) in d_pre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *dv *= gelu_prime(*pv);
                }
                if grads.tracked(*w1) {
                    grads.accumulate(*w1, &matmul_tn(ln_out, &d_pre));
                }
                if grads.tracked(*b1) {
                    grads.accumulate(*b1, &col_sums(&d_pre));
                }
                let d_ln = matmul_nt(&d_pre, &params[*w1].value);
                let d_from_ln = ln_backward(
                    &d_ln,
                    xhat,
                    inv_std,
                    &params[*ln_gamma].value,
                    *ln_gamma,
                    *ln_beta,
                    grads,
                );
                add_into(&mut dx, &d_from_ln);
                dx
            }
            (
                Block::CrossAttnAdapter { ln_gamma, ln_beta, wq, wk, wv, wo },
                BlockCache::CrossAttnAdapter {
                    xhat,
                    inv_std,
                    ln_out,
                    q,
                    k,
                    v,
                    attn,
                    attn_out,
                    ctx,
                    ctx_len,
                },
            ) => {
                let mut dx = d_out.clone();
                if grads.tracked(*wo) {
                    grads.accumulate(*wo, &matmul_tn(attn_out, d_out));
                }
                let d_attn_out = matmul_nt(d_out, &params[*wo].value);
                let dim = q.cols();
                let scale = 1.0 / (dim as f64).sqrt();
                let rows = attn.rows();
                let src_len = *ctx_len;
                let batch = ctx.rows() / src_len;
                let tgt_len = rows / batch;
                debug_assert_eq!(batch * tgt_len, rows);
                let mut dq = Matrix::zeros(rows, dim);
                let mut dk = Matrix::zeros(ctx.rows(), dim);
                let mut dv = Matrix::zeros(ctx.rows(), dim);
                for b in 0..batch {
                    for i in 0..tgt_len {
                        let r = b * tgt_len + i;
                        let dor = d_attn_out.row(r);
                        let ar = attn.row(r);
                        // dA and the softmax Jacobian product.
                        let mut d_a = vec![0.0; src_len];
                        for (j, da) in d_a.iter_mut().enumerate() {
                            let vr = v.row(b * src_len + j);
                            *da = dor.iter().zip(vr).map(|(a, b)| a * b).sum();
                        }
                        let dot: f64 =
                            d_a.iter().zip(ar).map(|(da, a)| da * a).sum();
                        for j in 0..src_len {
                            let ds = ar[j] * (d_a[j] - dot) * scale;
                            let src = b * src_len + j;
                            let qr = q.row(r);
                            let kr = k.row(src);
                            let dqr = dq.row_mut(r);
                            for d in 0..dim {
                                dqr[d] += ds * kr[d];
                            }
                            let dkr = dk.row_mut(src);
                            for d in 0..dim {
                                dkr[d] += ds * qr[d];
                            }
                            // dv += A^T (d attn_out)
                            let a = ar[j];
                            let dvr = dv.row_mut(src);
                            for d in 0..dim {
                                dvr[d] += a * dor[d];
                            }
                        }
                    }
                }
                if grads.tracked(*wq) {
                    grads.accumulate(*wq, &matmul_tn(ln_out, &dq));
                }
                if grads.tracked(*wk) {
                    grads.accumulate(*wk, &matmul_tn(ctx, &dk));
                }
                if grads.tracked(*wv) {
                    grads.accumulate(*wv, &matmul_tn(ctx, &dv));
                }
                if let Some(acc) = d_ctx {
                    let mut d = matmul_nt(&dk, &params[*wk].value);
                    add_into(&mut d, &matmul_nt(&dv, &params[*wv].value));
                    add_into(acc, &d);
                }
                let d_ln = matmul_nt(&dq, &params[*wq].value);
                let d_from_ln = ln_backward(
                    &d_ln,
                    xhat,
                    inv_std,
                    &params[*ln_gamma].value,
                    *ln_gamma,
                    *ln_beta,
                    grads,
                );
                add_into(&mut dx, &d_from_ln);
                dx
            }
            (Block::TokenMix { m }, BlockCache::TokenMix { input, len }) => {
                let mix = &params[*m].value;
                let dim = input.cols();
                let batch = input.rows() / len;
                let mut dx = d_out.clone();
                if grads.tracked(*m) {
                    let mut dm = Matrix::zeros(mix.rows(), mix.cols());
                    for b in 0..batch {
                        for i in 0..*len {
                            let dr = d_out.row(b * len + i);
                            for j in 0..*len {
                                let xr = input.row(b * len + j);
                                let mut acc = 0.0;
                                for d in 0..dim {
                                    acc += dr[d] * xr[d];
                                }
                                dm[(i, j)] += acc;
                            }
                        }
                    }
                    grads.accumulate(*m, &dm);
                }
                for b in 0..batch {
                    for j in 0..*len {
                        let dst = b * len + j;
                        for i in 0..*len {
                            let w = mix[(i, j)];
                            if w == 0.0 {
                                continue;
                            }
                            let src = b * len + i;
                            for d in 0..dim {
                                let v = d_out[(src, d)] * w;
                                dx[(dst, d)] += v;
                            }
                        }
                    }
                }
                dx
            }
            (
                Block::VocabHead { w, b } | Block::RtdHead { w, b },
                BlockCache::Linear { input },
            ) => {
                if grads.tracked(*w) {
                    grads.accumulate(*w, &matmul_tn(input, d_out));
                }
                if grads.tracked(*b) {
                    grads.accumulate(*b, &col_sums(d_out));
                }
                matmul_nt(d_out, &params[*w].value)
            }
            _ => panic!("block/cache variant mismatch"),
        }
    }
}
