//! Tiny causal transformer policy with hand-written reverse-mode gradients.
//!
//! Architecture: token embedding + learned positional embedding, `n_blocks`
//! pre-norm blocks (single-head causal attention, GELU feed-forward of width
//! `ffn_mult * d`), final layer norm, and an output head tied to the token
//! embedding. All parameters live in one flat `Vec<f64>`; [`Layout`] maps
//! names to ranges.
//!
//! The forward pass is written once, position by position with a key/value
//! cache ([`Decoder`]). Sampling, scoring and training all go through it, so
//! logits seen while sampling are bit-identical to the ones recomputed for
//! the gradient.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{response_surrogate, SurrogateConfig};
use crate::task::{tok, TokenId};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub context_window: usize,
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::task::VOCAB_SIZE,
            d_model: 32,
            n_blocks: 2,
            context_window: 80,
            ffn_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.d_model == 0 || self.context_window == 0 || self.ffn_mult == 0 {
            return Err(Error::invalid(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Named tensor ranges inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    tensors: Vec<(String, Range<usize>, [usize; 2])>,
    tok: usize,
    pos: usize,
    blocks: Vec<BlockOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.ffn_width());
        let mut tensors = Vec::new();
        let mut cursor = 0;
        let mut add = |name: String, shape: [usize; 2]| {
            let start = cursor;
            cursor += shape[0] * shape[1];
            tensors.push((name, start..cursor, shape));
            start
        };
        let tok = add("tok_emb".into(), [v, d]);
        let pos = add("pos_emb".into(), [cfg.context_window, d]);
        let blocks = (0..cfg.n_blocks)
            .map(|b| BlockOffsets {
                ln1_g: add(format!("block{b}.ln1.gain"), [1, d]),
                ln1_b: add(format!("block{b}.ln1.bias"), [1, d]),
                wq: add(format!("block{b}.attn.wq"), [d, d]),
                wk: add(format!("block{b}.attn.wk"), [d, d]),
                wv: add(format!("block{b}.attn.wv"), [d, d]),
                wo: add(format!("block{b}.attn.wo"), [d, d]),
                ln2_g: add(format!("block{b}.ln2.gain"), [1, d]),
                ln2_b: add(format!("block{b}.ln2.bias"), [1, d]),
                w1: add(format!("block{b}.ffn.w1"), [d, f]),
                b1: add(format!("block{b}.ffn.b1"), [1, f]),
                w2: add(format!("block{b}.ffn.w2"), [f, d]),
                b2: add(format!("block{b}.ffn.b2"), [1, d]),
            })
            .collect();
        let lnf_g = add("ln_f.gain".into(), [1, d]);
        let lnf_b = add("ln_f.bias".into(), [1, d]);
        Self {
            tensors,
            tok,
            pos,
            blocks,
            lnf_g,
            lnf_b,
            total: cursor,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// `(name, range, [rows, cols])` for every tensor, in storage order.
    pub fn tensors(&self) -> &[(String, Range<usize>, [usize; 2])] {
        &self.tensors
    }

    /// Name of the tensor holding flat index `idx`.
    pub fn name_of(&self, idx: usize) -> &str {
        self.tensors
            .iter()
            .find(|(_, r, _)| r.contains(&idx))
            .map_or("<out of range>", |(n, _, _)| n.as_str())
    }
}

/// The full differentiable parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    config: ModelConfig,
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl PolicyParams {
    /// Normal(0, 0.02) weights and embeddings, unit layer-norm gains, zero biases.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::init_with_std(config, INIT_STD, rng)
    }

    pub fn init_with_std<R: Rng + ?Sized>(config: ModelConfig, std: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let layout = Arc::clone(&p.layout);
        for (name, range, _) in layout.tensors() {
            let slot = &mut p.values[range.clone()];
            if name.ends_with(".gain") {
                slot.fill(1.0);
            } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                slot.fill(0.0);
            } else {
                for v in slot {
                    *v = normal.sample(rng);
                }
            }
        }
        Ok(p)
    }

    /// All-zero parameters (layer-norm gains included).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let values = vec![0.0; layout.total];
        Ok(Self {
            config,
            layout: Arc::new(layout),
            values,
        })
    }

    pub fn from_values(config: ModelConfig, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if values.len() != p.values.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter values, got {}",
                p.values.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::UpdateRejected {
                param: p.layout.name_of(i).to_string(),
            });
        }
        p.values = values;
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Crate-internal mutable access; public mutation goes through the
    /// optimizer, which enforces finiteness.
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Read-write view of a named tensor, for tests and tooling that need to
    /// set specific weights.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self
            .layout
            .tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, r, _)| r.clone())?;
        Some(&mut self.values[range])
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let (_, r, _) = self.layout.tensors.iter().find(|(n, _, _)| n == name)?;
        Some(&self.values[r.clone()])
    }

    /// FNV-1a over the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.values {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// An immutable, versioned copy of the parameters.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    params: Arc<PolicyParams>,
    version: u64,
}

impl PolicySnapshot {
    pub fn new(params: &PolicyParams, version: u64) -> Self {
        Self {
            params: Arc::new(params.clone()),
            version,
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

impl std::ops::Deref for PolicySnapshot {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.params
    }
}

/// Gradient congruent with [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    values: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self {
            values: vec![0.0; params.values.len()],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

// ---------------------------------------------------------------------------
// dense helpers; matrices are row-major `[rows, cols]`

/// `out = x W` for `W: [x.len(), out.len()]`.
#[inline]
fn vec_mat(x: &[f64], w: &[f64], out: &mut [f64]) {
    let cols = out.len();
    out.fill(0.0);
    for (k, &xk) in x.iter().enumerate() {
        let row = &w[k * cols..(k + 1) * cols];
        for (o, &wkj) in out.iter_mut().zip(row) {
            *o += xk * wkj;
        }
    }
}

/// `dx += dy W^T` for `W: [dx.len(), dy.len()]`.
#[inline]
fn vec_mat_t_acc(dy: &[f64], w: &[f64], dx: &mut [f64]) {
    let cols = dy.len();
    for (k, d) in dx.iter_mut().enumerate() {
        let row = &w[k * cols..(k + 1) * cols];
        *d += dot(row, dy);
    }
}

/// `dW += x^T dy`.
#[inline]
fn outer_acc(x: &[f64], dy: &[f64], dw: &mut [f64]) {
    let cols = dy.len();
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        let row = &mut dw[k * cols..(k + 1) * cols];
        for (r, &g) in row.iter_mut().zip(dy) {
            *r += xk * g;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Layer norm; writes normalized `xhat` and `y = xhat * g + b`, returns `rstd`.
fn layer_norm(x: &[f64], g: &[f64], b: &[f64], xhat: &mut [f64], y: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        y[i] = xhat[i] * g[i] + b[i];
    }
    rstd
}

/// Backprop through layer norm; accumulates into `dx`, `dg`, `db`.
fn layer_norm_back(dy: &[f64], xhat: &[f64], rstd: f64, g: &[f64], dx: &mut [f64], dg: &mut [f64], db: &mut [f64]) {
    let n = dy.len() as f64;
    let mut mean_dxhat = 0.0;
    let mut mean_dxhat_xhat = 0.0;
    for i in 0..dy.len() {
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
        let dxh = dy[i] * g[i];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat[i];
    }
    mean_dxhat /= n;
    mean_dxhat_xhat /= n;
    for i in 0..dy.len() {
        let dxh = dy[i] * g[i];
        dx[i] += rstd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// `log softmax(z / T)` into `out`.
pub fn log_softmax(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let inv_t = 1.0 / temperature;
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z)) * inv_t;
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z * inv_t - max;
        sum += o.exp();
    }
    let lse = sum.ln();
    for o in out.iter_mut() {
        *o -= lse;
    }
}

// ---------------------------------------------------------------------------
// forward

/// Activations kept for the backward pass, `[positions, width]` flattened.
#[derive(Debug, Default, Clone)]
struct BlockTape {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    h1: Vec<f64>,
    q: Vec<f64>,
    probs: Vec<Vec<f64>>,
    ctx: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    h2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

#[derive(Debug, Default, Clone)]
struct Tape {
    blocks: Vec<BlockTape>,
    xhatf: Vec<f64>,
    rstdf: Vec<f64>,
    hf: Vec<f64>,
}

/// Incremental forward pass with a key/value cache.
#[derive(Debug, Clone)]
pub struct Decoder<'p> {
    params: &'p PolicyParams,
    tokens: Vec<TokenId>,
    keys: Vec<Vec<f64>>,
    vals: Vec<Vec<f64>>,
    tape: Option<Tape>,
    logits: Vec<f64>,
    // scratch
    x: Vec<f64>,
    xhat: Vec<f64>,
    h: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    ctx: Vec<f64>,
    proj: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    scores: Vec<f64>,
}

impl<'p> Decoder<'p> {
    pub fn new(params: &'p PolicyParams) -> Self {
        Self::build(params, false)
    }

    fn with_tape(params: &'p PolicyParams) -> Self {
        Self::build(params, true)
    }

    fn build(params: &'p PolicyParams, record: bool) -> Self {
        let c = params.config;
        let (d, f) = (c.d_model, c.ffn_width());
        Self {
            params,
            tokens: Vec::new(),
            keys: vec![Vec::new(); c.n_blocks],
            vals: vec![Vec::new(); c.n_blocks],
            tape: record.then(|| Tape {
                blocks: vec![BlockTape::default(); c.n_blocks],
                ..Tape::default()
            }),
            logits: vec![0.0; c.vocab_size],
            x: vec![0.0; d],
            xhat: vec![0.0; d],
            h: vec![0.0; d],
            q: vec![0.0; d],
            k: vec![0.0; d],
            v: vec![0.0; d],
            ctx: vec![0.0; d],
            proj: vec![0.0; d],
            u: vec![0.0; f],
            g: vec![0.0; f],
            scores: Vec::with_capacity(c.context_window),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Logits produced after the most recent [`push`](Self::push).
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Feeds one token and returns the next-token logits.
    pub fn push(&mut self, token: TokenId) -> Result<&[f64]> {
        let c = self.params.config;
        if token >= c.vocab_size {
            return Err(Error::invalid(format!(
                "token id {token} outside vocabulary of size {}",
                c.vocab_size
            )));
        }
        let pos = self.tokens.len();
        if pos >= c.context_window {
            return Err(Error::invalid(format!(
                "context of {} tokens exceeds window {}",
                pos + 1,
                c.context_window
            )));
        }
        self.tokens.push(token);
        let p = &self.params.values;
        let lay = &*self.params.layout;
        let d = c.d_model;
        let f = c.ffn_width();
        let scale = 1.0 / (d as f64).sqrt();

        for i in 0..d {
            self.x[i] = p[lay.tok + token * d + i] + p[lay.pos + pos * d + i];
        }
        for (b, off) in lay.blocks.iter().enumerate() {
            let rstd = layer_norm(
                &self.x,
                &p[off.ln1_g..off.ln1_g + d],
                &p[off.ln1_b..off.ln1_b + d],
                &mut self.xhat,
                &mut self.h,
            );
            vec_mat(&self.h, &p[off.wq..off.wq + d * d], &mut self.q);
            vec_mat(&self.h, &p[off.wk..off.wk + d * d], &mut self.k);
            vec_mat(&self.h, &p[off.wv..off.wv + d * d], &mut self.v);
            self.keys[b].extend_from_slice(&self.k);
            self.vals[b].extend_from_slice(&self.v);

            self.scores.clear();
            let keys = &self.keys[b];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=pos {
                let s = dot(&self.q, &keys[j * d..(j + 1) * d]) * scale;
                max = max.max(s);
                self.scores.push(s);
            }
            let mut sum = 0.0;
            for s in self.scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in self.scores.iter_mut() {
                *s /= sum;
            }
            self.ctx.fill(0.0);
            let vals = &self.vals[b];
            for (j, &a) in self.scores.iter().enumerate() {
                axpy(a, &vals[j * d..(j + 1) * d], &mut self.ctx);
            }
            vec_mat(&self.ctx, &p[off.wo..off.wo + d * d], &mut self.proj);
            if let Some(t) = self.tape.as_mut() {
                let bt = &mut t.blocks[b];
                bt.xhat1.extend_from_slice(&self.xhat);
                bt.rstd1.push(rstd);
                bt.h1.extend_from_slice(&self.h);
                bt.q.extend_from_slice(&self.q);
                bt.probs.push(self.scores.clone());
                bt.ctx.extend_from_slice(&self.ctx);
            }
            for i in 0..d {
                self.x[i] += self.proj[i];
            }

            let rstd2 = layer_norm(
                &self.x,
                &p[off.ln2_g..off.ln2_g + d],
                &p[off.ln2_b..off.ln2_b + d],
                &mut self.xhat,
                &mut self.h,
            );
            vec_mat(&self.h, &p[off.w1..off.w1 + d * f], &mut self.u);
            for j in 0..f {
                self.u[j] += p[off.b1 + j];
                self.g[j] = gelu(self.u[j]);
            }
            vec_mat(&self.g, &p[off.w2..off.w2 + f * d], &mut self.proj);
            for i in 0..d {
                self.x[i] += self.proj[i] + p[off.b2 + i];
            }
            if let Some(t) = self.tape.as_mut() {
                let bt = &mut t.blocks[b];
                bt.xhat2.extend_from_slice(&self.xhat);
                bt.rstd2.push(rstd2);
                bt.h2.extend_from_slice(&self.h);
                bt.u.extend_from_slice(&self.u);
                bt.g.extend_from_slice(&self.g);
            }
        }
        let rstdf = layer_norm(
            &self.x,
            &p[lay.lnf_g..lay.lnf_g + d],
            &p[lay.lnf_b..lay.lnf_b + d],
            &mut self.xhat,
            &mut self.h,
        );
        let emb = &p[lay.tok..lay.tok + c.vocab_size * d];
        for (j, z) in self.logits.iter_mut().enumerate() {
            *z = dot(&self.h, &emb[j * d..(j + 1) * d]);
        }
        if let Some(t) = self.tape.as_mut() {
            t.xhatf.extend_from_slice(&self.xhat);
            t.rstdf.push(rstdf);
            t.hf.extend_from_slice(&self.h);
        }
        Ok(&self.logits)
    }

    /// Accumulates parameter gradients given `dlogits` (`[len, V]`) for every
    /// fed position. Requires a recording decoder.
    fn backward(&self, dlogits: &[f64], grad: &mut [f64]) {
        let tape = self.tape.as_ref().expect("backward needs a recording decoder");
        let c = self.params.config;
        let p = &self.params.values;
        let lay = &*self.params.layout;
        let (d, f, vocab) = (c.d_model, c.ffn_width(), c.vocab_size);
        let n = self.tokens.len();
        let scale = 1.0 / (d as f64).sqrt();

        let mut dx = vec![0.0; n * d];
        let mut dh = vec![0.0; d];
        let emb = &p[lay.tok..lay.tok + vocab * d];
        for i in 0..n {
            let dz = &dlogits[i * vocab..(i + 1) * vocab];
            if dz.iter().all(|&v| v == 0.0) {
                continue;
            }
            dh.fill(0.0);
            let hf = &tape.hf[i * d..(i + 1) * d];
            for (j, &g) in dz.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                axpy(g, &emb[j * d..(j + 1) * d], &mut dh);
                axpy(g, hf, &mut grad[lay.tok + j * d..lay.tok + (j + 1) * d]);
            }
            let (dg, db) = two_slices(grad, lay.lnf_g, lay.lnf_b, d);
            layer_norm_back(
                &dh,
                &tape.xhatf[i * d..(i + 1) * d],
                tape.rstdf[i],
                &p[lay.lnf_g..lay.lnf_g + d],
                &mut dx[i * d..(i + 1) * d],
                dg,
                db,
            );
        }

        let mut dgv = vec![0.0; f];
        let mut dh2 = vec![0.0; d];
        let mut dctx = vec![0.0; n * d];
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut da = Vec::with_capacity(n);
        for (b, off) in lay.blocks.iter().enumerate().rev() {
            let bt = &tape.blocks[b];
            // feed-forward
            for i in 0..n {
                let dy = &dx[i * d..(i + 1) * d];
                for k in 0..d {
                    grad[off.b2 + k] += dy[k];
                }
                outer_acc(&bt.g[i * f..(i + 1) * f], dy, &mut grad[off.w2..off.w2 + f * d]);
                dgv.fill(0.0);
                vec_mat_t_acc(dy, &p[off.w2..off.w2 + f * d], &mut dgv);
                let u = &bt.u[i * f..(i + 1) * f];
                for j in 0..f {
                    dgv[j] *= gelu_grad(u[j]);
                    grad[off.b1 + j] += dgv[j];
                }
                outer_acc(&bt.h2[i * d..(i + 1) * d], &dgv, &mut grad[off.w1..off.w1 + d * f]);
                dh2.fill(0.0);
                vec_mat_t_acc(&dgv, &p[off.w1..off.w1 + d * f], &mut dh2);
                let (dg, db) = two_slices(grad, off.ln2_g, off.ln2_b, d);
                layer_norm_back(
                    &dh2,
                    &bt.xhat2[i * d..(i + 1) * d],
                    bt.rstd2[i],
                    &p[off.ln2_g..off.ln2_g + d],
                    &mut dx[i * d..(i + 1) * d],
                    dg,
                    db,
                );
            }
            // attention output projection
            dctx.fill(0.0);
            for i in 0..n {
                let dy = &dx[i * d..(i + 1) * d];
                outer_acc(&bt.ctx[i * d..(i + 1) * d], dy, &mut grad[off.wo..off.wo + d * d]);
                vec_mat_t_acc(dy, &p[off.wo..off.wo + d * d], &mut dctx[i * d..(i + 1) * d]);
            }
            // attention mixing
            dq.fill(0.0);
            dk.fill(0.0);
            dv.fill(0.0);
            let keys = &self.keys[b];
            let vals = &self.vals[b];
            for i in 0..n {
                let a = &bt.probs[i];
                let dci = &dctx[i * d..(i + 1) * d];
                da.clear();
                let mut weighted = 0.0;
                for (j, &aij) in a.iter().enumerate() {
                    let g = dot(dci, &vals[j * d..(j + 1) * d]);
                    weighted += aij * g;
                    da.push(g);
                    axpy(aij, dci, &mut dv[j * d..(j + 1) * d]);
                }
                let qi = &bt.q[i * d..(i + 1) * d];
                for (j, &aij) in a.iter().enumerate() {
                    let ds = aij * (da[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    axpy(ds, &keys[j * d..(j + 1) * d], &mut dq[i * d..(i + 1) * d]);
                    axpy(ds, qi, &mut dk[j * d..(j + 1) * d]);
                }
            }
            // q/k/v projections and the first layer norm
            for i in 0..n {
                let h = &bt.h1[i * d..(i + 1) * d];
                dh.fill(0.0);
                for (w, dm) in [(off.wq, &dq), (off.wk, &dk), (off.wv, &dv)] {
                    let g = &dm[i * d..(i + 1) * d];
                    outer_acc(h, g, &mut grad[w..w + d * d]);
                    vec_mat_t_acc(g, &p[w..w + d * d], &mut dh);
                }
                let (dg, db) = two_slices(grad, off.ln1_g, off.ln1_b, d);
                layer_norm_back(
                    &dh,
                    &bt.xhat1[i * d..(i + 1) * d],
                    bt.rstd1[i],
                    &p[off.ln1_g..off.ln1_g + d],
                    &mut dx[i * d..(i + 1) * d],
                    dg,
                    db,
                );
            }
        }
        for (i, &t) in self.tokens.iter().enumerate() {
            let dxi = &dx[i * d..(i + 1) * d];
            axpy(1.0, dxi, &mut grad[lay.tok + t * d..lay.tok + (t + 1) * d]);
            axpy(1.0, dxi, &mut grad[lay.pos + i * d..lay.pos + (i + 1) * d]);
        }
    }
}

/// Disjoint mutable views of two length-`len` tensors at `a < b`.
fn two_slices(grad: &mut [f64], a: usize, b: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = grad.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}

/// Next-token logits after reading `context`.
pub fn logits(params: &PolicyParams, context: &[TokenId]) -> Result<Vec<f64>> {
    if context.is_empty() {
        return Err(Error::invalid("context must hold at least one token"));
    }
    let mut dec = Decoder::new(params);
    for &t in context {
        dec.push(t)?;
    }
    Ok(dec.logits().to_vec())
}

/// Decoding rule for [`generate`].
pub enum Decoding<'r, R: Rng + ?Sized> {
    /// Categorical sampling from `softmax(logits / temperature)`.
    Sample { temperature: f64, rng: &'r mut R },
    /// Argmax; ties go to the lowest token id.
    Greedy,
}

/// One generated response.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    /// Raw logits each token was drawn from.
    pub logits: Vec<Vec<f64>>,
    /// `log softmax(logits / T)[token]` per step, at the decoding temperature
    /// (1 for greedy).
    pub logprobs: Vec<f64>,
    pub truncated: bool,
}

/// Autoregressive generation until `END` or `max_len` tokens.
pub fn generate<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &[TokenId],
    max_len: usize,
    mut decoding: Decoding<'_, R>,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must hold at least one token"));
    }
    let window = params.config.context_window;
    if prompt.len() + max_len.saturating_sub(1) > window {
        return Err(Error::invalid(format!(
            "prompt of {} tokens plus {max_len} response tokens exceeds context window {window}",
            prompt.len()
        )));
    }
    let temperature = match &decoding {
        Decoding::Sample { temperature, .. } => {
            if !(temperature.is_finite() && *temperature > 0.0) {
                return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
            }
            *temperature
        }
        Decoding::Greedy => 1.0,
    };
    let mut dec = Decoder::new(params);
    for &t in prompt {
        dec.push(t)?;
    }
    let vocab = params.config.vocab_size;
    let mut out = Generation {
        tokens: Vec::with_capacity(max_len),
        logits: Vec::with_capacity(max_len),
        logprobs: Vec::with_capacity(max_len),
        truncated: true,
    };
    let mut lsm = vec![0.0; vocab];
    for step in 0..max_len {
        let z = dec.logits();
        log_softmax(z, temperature, &mut lsm);
        let next = match &mut decoding {
            Decoding::Sample { rng, .. } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = vocab - 1;
                for (j, l) in lsm.iter().enumerate() {
                    acc += l.exp();
                    if u < acc {
                        pick = j;
                        break;
                    }
                }
                pick
            }
            Decoding::Greedy => {
                let mut best = 0;
                for j in 1..vocab {
                    if z[j] > z[best] {
                        best = j;
                    }
                }
                best
            }
        };
        out.logits.push(z.to_vec());
        out.logprobs.push(lsm[next]);
        out.tokens.push(next);
        if next == tok::END {
            out.truncated = false;
            break;
        }
        if step + 1 < max_len {
            dec.push(next)?;
        }
    }
    Ok(out)
}

/// Samples one response at `temperature`.
pub fn sample_response<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &[TokenId],
    temperature: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<Generation> {
    generate(params, prompt, max_len, Decoding::Sample { temperature, rng })
}

pub fn greedy_response(params: &PolicyParams, prompt: &[TokenId], max_len: usize) -> Result<Generation> {
    generate::<rand_chacha::ChaCha8Rng>(params, prompt, max_len, Decoding::Greedy)
}

fn check_tokens(params: &PolicyParams, tokens: &[TokenId]) -> Result<()> {
    let v = params.config.vocab_size;
    if let Some(t) = tokens.iter().find(|&&t| t >= v) {
        return Err(Error::invalid(format!("token id {t} outside vocabulary of size {v}")));
    }
    Ok(())
}

/// Per-token `log softmax(logits / T)[token]` of `response` given `prompt`.
pub fn logprob(params: &PolicyParams, prompt: &[TokenId], response: &[TokenId], temperature: f64) -> Result<Vec<f64>> {
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must hold at least one token"));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    check_tokens(params, response)?;
    let mut dec = Decoder::new(params);
    for &t in prompt {
        dec.push(t)?;
    }
    let mut lsm = vec![0.0; params.config.vocab_size];
    let mut out = Vec::with_capacity(response.len());
    for (i, &t) in response.iter().enumerate() {
        log_softmax(dec.logits(), temperature, &mut lsm);
        out.push(lsm[t]);
        if i + 1 < response.len() {
            dec.push(t)?;
        }
    }
    Ok(out)
}

/// One response inside a surrogate batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSequence {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub advantage: f64,
    pub old_logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
}

/// The G responses to one prompt.
pub type SurrogateGroup = Vec<ScoredSequence>;

fn check_shapes(seq: &ScoredSequence) -> Result<()> {
    let r = seq.response.len();
    if seq.old_logprobs.len() != r || seq.ref_logprobs.len() != r {
        return Err(Error::invalid(format!(
            "response of {r} tokens has {} old and {} reference logprobs",
            seq.old_logprobs.len(),
            seq.ref_logprobs.len()
        )));
    }
    if seq.prompt.is_empty() {
        return Err(Error::invalid("prompt must hold at least one token"));
    }
    Ok(())
}

/// Objective contribution and gradient of one sequence, weighted by `weight`.
fn sequence_grad(
    params: &PolicyParams,
    seq: &ScoredSequence,
    cfg: &SurrogateConfig,
    weight: f64,
    grad: &mut [f64],
) -> Result<f64> {
    check_shapes(seq)?;
    check_tokens(params, &seq.response)?;
    let r = seq.response.len();
    if r == 0 {
        return Ok(0.0);
    }
    let vocab = params.config.vocab_size;
    let mut dec = Decoder::with_tape(params);
    for &t in &seq.prompt {
        dec.push(t)?;
    }
    let first = seq.prompt.len() - 1;
    let mut lsms = Vec::with_capacity(r * vocab);
    let mut lsm = vec![0.0; vocab];
    let mut lp = Vec::with_capacity(r);
    for (i, &t) in seq.response.iter().enumerate() {
        log_softmax(dec.logits(), cfg.temperature, &mut lsm);
        lp.push(lsm[t]);
        lsms.extend_from_slice(&lsm);
        if i + 1 < r {
            dec.push(t)?;
        }
    }
    let (value, dlp) = response_surrogate(&lp, &seq.old_logprobs, &seq.ref_logprobs, seq.advantage, cfg);
    if weight == 0.0 {
        return Ok(0.0);
    }
    let n = dec.len();
    let mut dlogits = vec![0.0; n * vocab];
    let inv_t = 1.0 / cfg.temperature;
    for (i, &t) in seq.response.iter().enumerate() {
        let g = weight * dlp[i];
        if g == 0.0 {
            continue;
        }
        let row = &mut dlogits[(first + i) * vocab..(first + i + 1) * vocab];
        let l = &lsms[i * vocab..(i + 1) * vocab];
        for j in 0..vocab {
            row[j] = -g * l[j].exp() * inv_t;
        }
        row[t] += g * inv_t;
    }
    dec.backward(&dlogits, grad);
    Ok(weight * value)
}

/// Value and exact gradient (for ascent) of the GRPO surrogate over a batch
/// of groups: per response the aggregated clipped term minus the KL
/// penalty, averaged over each group and then over groups.
///
/// Groups are evaluated in parallel and reduced in index order, so the
/// result does not depend on the worker count.
pub fn grad_objective(
    params: &PolicyParams,
    batch: &[SurrogateGroup],
    cfg: &SurrogateConfig,
) -> Result<(f64, Gradient)> {
    if batch.is_empty() || batch.iter().any(|g| g.is_empty()) {
        return Err(Error::invalid("surrogate batch must hold non-empty groups"));
    }
    let per_group: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .map(|group| {
            let mut grad = vec![0.0; params.values.len()];
            let w = 1.0 / group.len() as f64;
            let mut value = 0.0;
            for seq in group {
                value += sequence_grad(params, seq, cfg, w, &mut grad)?;
            }
            Ok((value, grad))
        })
        .collect();
    let mut total = Gradient::zeros_like(params);
    let mut value = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for r in per_group {
        let (v, g) = r?;
        value += v * inv;
        for (a, b) in total.values.iter_mut().zip(&g) {
            *a += b * inv;
        }
    }
    Ok((value, total))
}

/// Cross-entropy gradient for supervised warm-start: returns the summed
/// negative log-likelihood of `target` given `prompt` at temperature 1 and
/// accumulates its gradient (for descent) scaled by `weight`.
pub fn nll_grad(
    params: &PolicyParams,
    prompt: &[TokenId],
    target: &[TokenId],
    weight: f64,
    grad: &mut Gradient,
) -> Result<f64> {
    if prompt.is_empty() || target.is_empty() {
        return Err(Error::invalid("prompt and target must be non-empty"));
    }
    check_tokens(params, target)?;
    let vocab = params.config.vocab_size;
    let mut dec = Decoder::with_tape(params);
    for &t in prompt {
        dec.push(t)?;
    }
    let mut dlogits = Vec::with_capacity((prompt.len() + target.len()) * vocab);
    dlogits.resize((prompt.len() - 1) * vocab, 0.0);
    let mut lsm = vec![0.0; vocab];
    let mut nll = 0.0;
    for (i, &t) in target.iter().enumerate() {
        log_softmax(dec.logits(), 1.0, &mut lsm);
        nll -= lsm[t];
        dlogits.extend(lsm.iter().map(|l| weight * l.exp()));
        let at = dlogits.len() - vocab + t;
        dlogits[at] -= weight;
        if i + 1 < target.len() {
            dec.push(t)?;
        }
    }
    dec.backward(&dlogits, &mut grad.values);
    Ok(nll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 6,
            d_model: 4,
            n_blocks: 2,
            context_window: 12,
            ffn_mult: 2,
        }
    }

    #[test]
    fn parameter_count_is_a_function_of_shape() {
        let c = ModelConfig::default();
        let (v, d, f, w) = (20, 32, 128, 80);
        let per_block = 2 * d + 4 * d * d + 2 * d + d * f + f + f * d + d;
        assert_eq!(c.param_count(), v * d + w * d + 2 * per_block + 2 * d);
    }

    #[test]
    fn zero_embedding_gives_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = PolicyParams::init(small(), &mut rng).unwrap();
        p.tensor_mut("tok_emb").unwrap().fill(0.0);
        let z = logits(&p, &[1, 2, 3]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PolicyParams::init_with_std(small(), 0.5, &mut rng).unwrap();
        let a = logits(&p, &[0, 5, 2, 2]).unwrap();
        let b = logits(&p, &[0, 5, 2, 2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PolicyParams::init(small(), &mut rng).unwrap();
        assert!(logits(&p, &[6]).is_err());
        assert!(logits(&p, &[0; 13]).is_err());
        assert!(logits(&p, &[]).is_err());
        assert!(logprob(&p, &[0], &[9], 1.0).is_err());
    }

    #[test]
    fn uniform_logprobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = PolicyParams::init(ModelConfig { vocab_size: 4, ..small() }, &mut rng).unwrap();
        p.tensor_mut("tok_emb").unwrap().fill(0.0);
        let lp = logprob(&p, &[1], &[0, 3, 2], 1.3).unwrap();
        for v in lp {
            assert!((v + 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn max_len_zero_is_empty_and_truncated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PolicyParams::init(ModelConfig::default(), &mut rng).unwrap();
        let g = sample_response(&p, &[tok::BOS], 1.0, 0, &mut rng).unwrap();
        assert!(g.tokens.is_empty());
        assert!(g.truncated);
    }

    #[test]
    fn sampling_is_seed_deterministic_and_matches_logprob() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = PolicyParams::init_with_std(ModelConfig::default(), 0.3, &mut rng).unwrap();
        let prompt = [tok::BOS, 3, tok::PLUS, 4, tok::EQ];
        let a = sample_response(&p, &prompt, 1.5, 30, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_response(&p, &prompt, 1.5, 30, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let lp = logprob(&p, &prompt, &a.tokens, 1.5).unwrap();
        assert_eq!(lp, a.logprobs);
    }

    #[test]
    fn all_zero_advantage_without_kl_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = PolicyParams::init_with_std(small(), 0.5, &mut rng).unwrap();
        let prompt = vec![0, 1];
        let response = vec![2, 3, 4];
        let lp = logprob(&p, &prompt, &response, 1.0).unwrap();
        let seq = ScoredSequence {
            prompt,
            response,
            advantage: 0.0,
            old_logprobs: lp.clone(),
            ref_logprobs: lp.iter().map(|v| v - 0.3).collect(),
        };
        let cfg = SurrogateConfig {
            kl_beta: 0.0,
            temperature: 1.0,
            ..SurrogateConfig::default()
        };
        let (v, g) = grad_objective(&p, &[vec![seq]], &cfg).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = PolicyParams::init(small(), &mut rng).unwrap();
        let seq = ScoredSequence {
            prompt: vec![0],
            response: vec![1, 2],
            advantage: 1.0,
            old_logprobs: vec![0.0],
            ref_logprobs: vec![0.0, 0.0],
        };
        assert!(grad_objective(&p, &[vec![seq]], &SurrogateConfig::default()).is_err());
        assert!(grad_objective(&p, &[], &SurrogateConfig::default()).is_err());
    }

    #[test]
    fn layout_names_resolve() {
        let l = Layout::new(&small());
        assert_eq!(l.name_of(0), "tok_emb");
        assert_eq!(l.name_of(l.total() - 1), "ln_f.bias");
        assert_eq!(l.name_of(l.total()), "<out of range>");
    }
}
