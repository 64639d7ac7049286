//! Two-layer (configurable) pre-LayerNorm causal transformer decoder.
//!
//! Layout of one forward pass over a caption prefix:
//!
//! ```text
//! position 0        context features -> linear projection (+ pos 0)
//! position 1        <bos> embedding   (+ pos 1)
//! position t+1      token t embedding (+ pos t+1)
//! ```
//!
//! The output at position `t + 1` is the distribution of token `t` of the
//! caption. `<bos>` and `<pad>` are never emitted, and at step
//! `max_len - 1` only `<eos>` may be emitted, so the probabilities of all
//! complete sequences of at most `max_len` tokens sum to one.
//!
//! Parameters live in one flat `Vec<f64>`; [`Layout`] maps names to
//! offsets. Backpropagation is written out by hand and checked against
//! central finite differences in the tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::types::{TokenId, Vocabulary};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_dim: usize,
    /// Maximum caption length in tokens, eos included.
    pub max_len: usize,
    pub bos: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
}

impl ModelConfig {
    /// Defaults: 2 layers, hidden 64, 4 heads, feed-forward 2x hidden.
    pub fn new(vocab: &Vocabulary, feature_dim: usize, max_len: usize) -> Self {
        Self {
            vocab_size: vocab.len(),
            feature_dim,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            ff_dim: 128,
            max_len,
            bos: vocab.bos(),
            eos: vocab.eos(),
            pad: vocab.pad(),
        }
    }

    pub fn with_width(mut self, d_model: usize, n_heads: usize, ff_dim: usize) -> Self {
        self.d_model = d_model;
        self.n_heads = n_heads;
        self.ff_dim = ff_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return input_err("d_model must be a positive multiple of n_heads");
        }
        if self.max_len < 2 {
            return input_err("max_len must be at least 2");
        }
        if self.n_layers == 0 || self.ff_dim == 0 || self.feature_dim == 0 {
            return input_err("n_layers, ff_dim and feature_dim must be positive");
        }
        for id in [self.bos, self.eos, self.pad] {
            if id >= self.vocab_size {
                return input_err("special token id out of range");
            }
        }
        Ok(())
    }

    /// Number of learned positions: context, bos, up to max_len tokens.
    pub fn n_positions(&self) -> usize {
        self.max_len + 2
    }

    /// Whether `token` may be emitted at caption step `step` (0-based).
    pub fn allowed(&self, step: usize, token: TokenId) -> bool {
        if step + 1 >= self.max_len {
            token == self.eos
        } else {
            token != self.bos && token != self.pad
        }
    }
}

#[derive(Debug, Clone)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Offsets of every named tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    ctx_w: usize,
    ctx_b: usize,
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    out_w: usize,
    out_b: usize,
    total: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let d = c.d_model;
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let ctx_w = take(c.feature_dim * d);
        let ctx_b = take(d);
        let tok_emb = take(c.vocab_size * d);
        let pos_emb = take(c.n_positions() * d);
        let layers = (0..c.n_layers)
            .map(|_| LayerOffsets {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                bo: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * c.ff_dim),
                b1: take(c.ff_dim),
                w2: take(c.ff_dim * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let out_w = take(d * c.vocab_size);
        let out_b = take(c.vocab_size);
        Self { ctx_w, ctx_b, tok_emb, pos_emb, layers, lnf_g, lnf_b, out_w, out_b, total: off }
    }

    /// Offsets of LayerNorm gains, which start at one instead of noise.
    fn gain_ranges(&self, d: usize) -> Vec<std::ops::Range<usize>> {
        let mut r = vec![self.lnf_g..self.lnf_g + d];
        for l in &self.layers {
            r.push(l.ln1_g..l.ln1_g + d);
            r.push(l.ln2_g..l.ln2_g + d);
        }
        r
    }

    fn bias_ranges(&self, c: &ModelConfig) -> Vec<std::ops::Range<usize>> {
        let d = c.d_model;
        let mut r = vec![
            self.ctx_b..self.ctx_b + d,
            self.lnf_b..self.lnf_b + d,
            self.out_b..self.out_b + c.vocab_size,
        ];
        for l in &self.layers {
            r.push(l.ln1_b..l.ln1_b + d);
            r.push(l.ln2_b..l.ln2_b + d);
            r.push(l.bo..l.bo + d);
            r.push(l.b1..l.b1 + c.ff_dim);
            r.push(l.b2..l.b2 + d);
        }
        r
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2: LnCache,
    b: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n: usize,
    features: Vec<f64>,
    inputs: Vec<TokenId>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    /// Final hidden states after the closing LayerNorm, `n × d_model`.
    pub hidden: Vec<f64>,
}

impl ForwardCache {
    pub fn positions(&self) -> usize {
        self.n
    }
}

/// The captioner: configuration, tensor layout and flat parameters.
#[derive(Debug, Clone)]
pub struct Captioner {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl Captioner {
    /// Random initialization: N(0, 0.02²) weights, unit LayerNorm gains,
    /// zero biases. Deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut params: Vec<f64> = (0..layout.total).map(|_| normal.sample(&mut rng)).collect();
        for r in layout.gain_ranges(config.d_model) {
            params[r].iter_mut().for_each(|p| *p = 1.0);
        }
        for r in layout.bias_ranges(&config) {
            params[r].iter_mut().for_each(|p| *p = 0.0);
        }
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return input_err(format!("expected {} parameters, got {}", layout.total, params.len()));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.layout.total]
    }

    fn p(&self, off: usize, len: usize) -> &[f64] {
        &self.params[off..off + len]
    }

    /// Runs the decoder over `[context, inputs...]`. `inputs[0]` is normally
    /// `<bos>`.
    pub fn forward(&self, features: &[f64], inputs: &[TokenId]) -> ForwardCache {
        let c = &self.config;
        let lay = &self.layout;
        let d = c.d_model;
        let n = inputs.len() + 1;
        assert!(n <= c.n_positions(), "sequence longer than the position table");
        assert_eq!(features.len(), c.feature_dim, "feature dimension mismatch");

        let mut x = vec![0.0; n * d];
        let ctx = matmul(features, self.p(lay.ctx_w, c.feature_dim * d), 1, c.feature_dim, d);
        let ctx_b = self.p(lay.ctx_b, d);
        for j in 0..d {
            x[j] = ctx[j] + ctx_b[j];
        }
        for (i, &tok) in inputs.iter().enumerate() {
            let e = self.p(lay.tok_emb + tok * d, d);
            x[(i + 1) * d..(i + 2) * d].copy_from_slice(e);
        }
        let pos = self.p(lay.pos_emb, n * d);
        x.iter_mut().zip(pos).for_each(|(a, b)| *a += b);

        let mut layers = Vec::with_capacity(c.n_layers);
        for lo in &lay.layers {
            let x_in = x;
            let (a, ln1) = layer_norm(&x_in, n, d, self.p(lo.ln1_g, d), self.p(lo.ln1_b, d));
            let q = matmul(&a, self.p(lo.wq, d * d), n, d, d);
            let k = matmul(&a, self.p(lo.wk, d * d), n, d, d);
            let v = matmul(&a, self.p(lo.wv, d * d), n, d, d);
            let (o, probs) = causal_attention(&q, &k, &v, n, d, c.n_heads);
            let attn = matmul(&o, self.p(lo.wo, d * d), n, d, d);
            let bo = self.p(lo.bo, d);
            let mut x_mid = x_in.clone();
            for i in 0..n {
                for j in 0..d {
                    x_mid[i * d + j] += attn[i * d + j] + bo[j];
                }
            }
            let (b, ln2) = layer_norm(&x_mid, n, d, self.p(lo.ln2_g, d), self.p(lo.ln2_b, d));
            let mut h_pre = matmul(&b, self.p(lo.w1, d * c.ff_dim), n, d, c.ff_dim);
            let b1 = self.p(lo.b1, c.ff_dim);
            for i in 0..n {
                for j in 0..c.ff_dim {
                    h_pre[i * c.ff_dim + j] += b1[j];
                }
            }
            let h_act: Vec<f64> = h_pre.iter().map(|&z| gelu(z)).collect();
            let ff = matmul(&h_act, self.p(lo.w2, c.ff_dim * d), n, c.ff_dim, d);
            let b2 = self.p(lo.b2, d);
            let mut x_out = x_mid;
            for i in 0..n {
                for j in 0..d {
                    x_out[i * d + j] += ff[i * d + j] + b2[j];
                }
            }
            layers.push(LayerCache { ln1, a, q, k, v, probs, o, ln2, b, h_pre, h_act });
            x = x_out;
        }
        let (hidden, lnf) = layer_norm(&x, n, d, self.p(lay.lnf_g, d), self.p(lay.lnf_b, d));
        ForwardCache { n, features: features.to_vec(), inputs: inputs.to_vec(), layers, lnf, hidden }
    }

    /// Accumulates into `grads` the gradient of a scalar whose derivative
    /// with respect to the final hidden states is `d_hidden`.
    pub fn backward(&self, cache: &ForwardCache, d_hidden: &[f64], grads: &mut [f64]) {
        let c = &self.config;
        let lay = &self.layout;
        let d = c.d_model;
        let n = cache.n;
        let ff = c.ff_dim;
        debug_assert_eq!(grads.len(), lay.total);

        let mut dx = {
            let (dg, db) = split_pair(grads, lay.lnf_g, lay.lnf_b, d);
            layer_norm_back(d_hidden, &cache.lnf, self.p(lay.lnf_g, d), n, d, dg, db)
        };

        for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // feed-forward residual branch
            acc_bias(&dx, n, d, &mut grads[lo.b2..lo.b2 + d]);
            acc_at_b(&lc.h_act, &dx, n, ff, d, &mut grads[lo.w2..lo.w2 + ff * d]);
            let mut dh = matmul_bt(&dx, self.p(lo.w2, ff * d), n, d, ff);
            for (g, &z) in dh.iter_mut().zip(&lc.h_pre) {
                *g *= gelu_grad(z);
            }
            acc_bias(&dh, n, ff, &mut grads[lo.b1..lo.b1 + ff]);
            acc_at_b(&lc.b, &dh, n, d, ff, &mut grads[lo.w1..lo.w1 + d * ff]);
            let db_in = matmul_bt(&dh, self.p(lo.w1, d * ff), n, ff, d);
            let dx_ln2 = {
                let (dg, dbeta) = split_pair(grads, lo.ln2_g, lo.ln2_b, d);
                layer_norm_back(&db_in, &lc.ln2, self.p(lo.ln2_g, d), n, d, dg, dbeta)
            };
            dx.iter_mut().zip(&dx_ln2).for_each(|(a, b)| *a += b);

            // attention residual branch
            acc_bias(&dx, n, d, &mut grads[lo.bo..lo.bo + d]);
            acc_at_b(&lc.o, &dx, n, d, d, &mut grads[lo.wo..lo.wo + d * d]);
            let d_o = matmul_bt(&dx, self.p(lo.wo, d * d), n, d, d);
            let (dq, dk, dv) = causal_attention_back(&d_o, lc, n, d, c.n_heads);
            acc_at_b(&lc.a, &dq, n, d, d, &mut grads[lo.wq..lo.wq + d * d]);
            acc_at_b(&lc.a, &dk, n, d, d, &mut grads[lo.wk..lo.wk + d * d]);
            acc_at_b(&lc.a, &dv, n, d, d, &mut grads[lo.wv..lo.wv + d * d]);
            let mut da = matmul_bt(&dq, self.p(lo.wq, d * d), n, d, d);
            let da_k = matmul_bt(&dk, self.p(lo.wk, d * d), n, d, d);
            let da_v = matmul_bt(&dv, self.p(lo.wv, d * d), n, d, d);
            for i in 0..n * d {
                da[i] += da_k[i] + da_v[i];
            }
            let dx_ln1 = {
                let (dg, dbeta) = split_pair(grads, lo.ln1_g, lo.ln1_b, d);
                layer_norm_back(&da, &lc.ln1, self.p(lo.ln1_g, d), n, d, dg, dbeta)
            };
            dx.iter_mut().zip(&dx_ln1).for_each(|(a, b)| *a += b);
        }

        // embeddings
        for (g, v) in grads[lay.pos_emb..lay.pos_emb + n * d].iter_mut().zip(&dx) {
            *g += v;
        }
        for (i, &tok) in cache.inputs.iter().enumerate() {
            let row = &dx[(i + 1) * d..(i + 2) * d];
            let off = lay.tok_emb + tok * d;
            for (g, v) in grads[off..off + d].iter_mut().zip(row) {
                *g += v;
            }
        }
        let d_ctx = &dx[..d];
        for (g, v) in grads[lay.ctx_b..lay.ctx_b + d].iter_mut().zip(d_ctx) {
            *g += v;
        }
        acc_at_b(&cache.features, d_ctx, 1, c.feature_dim, d, &mut grads[lay.ctx_w..lay.ctx_w + c.feature_dim * d]);
    }

    /// Raw output logits for hidden row `row` of a forward cache.
    fn logits_row(&self, hidden: &[f64], row: usize) -> Vec<f64> {
        let c = &self.config;
        let d = c.d_model;
        let v = c.vocab_size;
        let h = &hidden[row * d..(row + 1) * d];
        let w = self.p(self.layout.out_w, d * v);
        let mut out = self.p(self.layout.out_b, v).to_vec();
        for (k, &hk) in h.iter().enumerate() {
            let wr = &w[k * v..(k + 1) * v];
            for j in 0..v {
                out[j] += hk * wr[j];
            }
        }
        out
    }

    /// Masked log-softmax of the distribution for caption step `step`,
    /// read from hidden row `step + 1`.
    fn step_log_softmax(&self, hidden: &[f64], step: usize) -> Vec<f64> {
        let logits = self.logits_row(hidden, step + 1);
        masked_log_softmax(&logits, |t| self.config.allowed(step, t))
    }

    fn inputs_for(&self, tokens: &[TokenId]) -> Vec<TokenId> {
        let mut inputs = Vec::with_capacity(tokens.len());
        inputs.push(self.config.bos);
        inputs.extend_from_slice(&tokens[..tokens.len().saturating_sub(1)]);
        inputs
    }

    /// Per-step log-softmax rows for teacher-forced `tokens` (eos included).
    pub fn teacher_forced_rows(&self, features: &[f64], tokens: &[TokenId]) -> Vec<Vec<f64>> {
        let cache = self.forward(features, &self.inputs_for(tokens));
        (0..tokens.len()).map(|t| self.step_log_softmax(&cache.hidden, t)).collect()
    }

    /// Returns `log p(tokens | context)` and adds `weight · ∇ log p` to
    /// `grads`.
    pub fn log_prob_with_grad(&self, features: &[f64], tokens: &[TokenId], weight: f64, grads: &mut [f64]) -> f64 {
        let c = &self.config;
        let d = c.d_model;
        let v = c.vocab_size;
        let cache = self.forward(features, &self.inputs_for(tokens));
        let mut d_hidden = vec![0.0; cache.n * d];
        let mut total = 0.0;
        let w_out = self.p(self.layout.out_w, d * v);
        for (t, &target) in tokens.iter().enumerate() {
            let lp = self.step_log_softmax(&cache.hidden, t);
            total += lp[target];
            if weight == 0.0 {
                continue;
            }
            // d(weight · log p[target]) / d logits = weight · (onehot - p)
            let dlogits: Vec<f64> = lp
                .iter()
                .enumerate()
                .map(|(j, &l)| weight * (f64::from(u8::from(j == target)) - if l.is_finite() { l.exp() } else { 0.0 }))
                .collect();
            let row = t + 1;
            let h = &cache.hidden[row * d..(row + 1) * d];
            for (gb, &dl) in grads[self.layout.out_b..self.layout.out_b + v].iter_mut().zip(&dlogits) {
                *gb += dl;
            }
            let gw = &mut grads[self.layout.out_w..self.layout.out_w + d * v];
            for k in 0..d {
                let hk = h[k];
                let wr = &w_out[k * v..(k + 1) * v];
                let mut acc = 0.0;
                for j in 0..v {
                    gw[k * v + j] += hk * dlogits[j];
                    acc += wr[j] * dlogits[j];
                }
                d_hidden[row * d + k] = acc;
            }
        }
        if weight != 0.0 {
            self.backward(&cache, &d_hidden, grads);
        }
        total
    }

    /// Distribution over the next token given a caption prefix.
    pub fn next_token_log_probs(&self, features: &[f64], prefix: &[TokenId]) -> Vec<f64> {
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(self.config.bos);
        inputs.extend_from_slice(prefix);
        let cache = self.forward(features, &inputs);
        self.step_log_softmax(&cache.hidden, prefix.len())
    }
}

/// Log-softmax over the tokens accepted by `allowed`; others get `-inf`.
pub fn masked_log_softmax(logits: &[f64], allowed: impl Fn(usize) -> bool) -> Vec<f64> {
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &l)| (l - max).exp())
        .sum();
    let lse = max + sum.ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &l)| if allowed(i) { l - lse } else { f64::NEG_INFINITY })
        .collect()
}

fn split_pair(grads: &mut [f64], a: usize, b: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = grads.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn layer_norm(x: &[f64], n: usize, d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xhat[i * d + j] = xh;
            y[i * d + j] = g[j] * xh + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_back(dy: &[f64], cache: &LnCache, g: &[f64], n: usize, d: usize, dg: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    for i in 0..n {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            let dxh = dyr[j] * g[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        let r = cache.rstd[i];
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dx[i * d + j] = r * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

fn causal_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = vec![0.0; n * d];
    let mut probs = vec![0.0; heads * n * n];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..n {
            let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
            let qi = &q[i * d + c0..i * d + c0 + dh];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let kj = &k[j * d + c0..j * d + c0 + dh];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                p[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for pj in p.iter_mut().take(i + 1) {
                *pj = (*pj - max).exp();
                sum += *pj;
            }
            for pj in p.iter_mut().take(i + 1) {
                *pj /= sum;
            }
            let oi = &mut o[i * d + c0..i * d + c0 + dh];
            for j in 0..=i {
                let vj = &v[j * d + c0..j * d + c0 + dh];
                for (oc, vc) in oi.iter_mut().zip(vj) {
                    *oc += p[j] * vc;
                }
            }
        }
    }
    (o, probs)
}

fn causal_attention_back(d_o: &[f64], lc: &LayerCache, n: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (q, k, v) = (&lc.q, &lc.k, &lc.v);
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dp = vec![0.0; n];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..n {
            let p = &lc.probs[(h * n + i) * n..(h * n + i + 1) * n];
            let doi = &d_o[i * d + c0..i * d + c0 + dh];
            let mut dot = 0.0;
            for j in 0..=i {
                let vj = &v[j * d + c0..j * d + c0 + dh];
                dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += p[j] * dp[j];
                for c in 0..dh {
                    dv[j * d + c0 + c] += p[j] * doi[c];
                }
            }
            for j in 0..=i {
                let ds = p[j] * (dp[j] - dot) * scale;
                for c in 0..dh {
                    dq[i * d + c0 + c] += ds * k[j * d + c0 + c];
                    dk[j * d + c0 + c] += ds * q[i * d + c0 + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// `a (n×k) · b (k×m)`.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * m..(l + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out (k×m) += aᵀ · dy` for `a (n×k)`, `dy (n×m)`.
fn acc_at_b(a: &[f64], dy: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let dyr = &dy[i * m..(i + 1) * m];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[l * m..(l + 1) * m];
            for (o, g) in orow.iter_mut().zip(dyr) {
                *o += av * g;
            }
        }
    }
}

/// `dy (n×m) · bᵀ` for `b (k×m)`, giving `n×k`.
fn matmul_bt(dy: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let dyr = &dy[i * m..(i + 1) * m];
        for l in 0..k {
            let brow = &b[l * m..(l + 1) * m];
            out[i * k + l] = dyr.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn acc_bias(dy: &[f64], n: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        for (o, g) in out.iter_mut().zip(&dy[i * m..(i + 1) * m]) {
            *o += g;
        }
    }
}
