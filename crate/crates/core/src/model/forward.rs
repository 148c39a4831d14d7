//! Forward pass. Every position is computed by the same row kernel
//! ([`Parameters::row_forward`]) against a key/value cache, so a full
//! forward pass and token-by-token decoding produce bit-identical logits,
//! and appending a token never changes earlier rows.

use super::{log_softmax, Nonlinearity, Parameters, Precision, SeqLogProb};
use crate::corpus::Token;
use crate::error::{Error, Result};

/// Per-position logit rows, row-major `[rows, vocab]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn zeros(rows: usize, vocab: usize) -> Self {
        Self {
            rows,
            vocab,
            data: vec![0.0; rows * vocab],
        }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.vocab..(t + 1) * self.vocab]
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct KvCache {
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub len: usize,
}

impl KvCache {
    fn new(n_layers: usize) -> Self {
        Self {
            k: vec![Vec::new(); n_layers],
            v: vec![Vec::new(); n_layers],
            len: 0,
        }
    }
}

/// Activations of one block for the whole sequence.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub x_in: Vec<f64>,
    pub ln1: Vec<f64>,
    pub ln1_hat: Vec<f64>,
    pub ln1_rstd: Vec<f64>,
    pub q: Vec<f64>,
    /// `[head][t][j]`, zero for `j > t`.
    pub probs: Vec<f64>,
    pub ctx: Vec<f64>,
    pub x_mid: Vec<f64>,
    pub ln2: Vec<f64>,
    pub ln2_hat: Vec<f64>,
    pub ln2_rstd: Vec<f64>,
    pub ff_pre: Vec<f64>,
    pub ff_act: Vec<f64>,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub tokens: Vec<Token>,
    pub logits: Logits,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) kv: KvCache,
    pub(crate) lnf: Vec<f64>,
    pub(crate) lnf_hat: Vec<f64>,
    pub(crate) lnf_rstd: Vec<f64>,
}

impl ForwardCache {
    /// Scores `target` against rows `prompt_len-1 ..`, i.e. a cache built by
    /// [`Parameters::forward_target`].
    pub fn target_score(&self, prompt_len: usize, target: &[Token]) -> SeqLogProb {
        let mut sum = 0.0;
        for (i, &tok) in target.iter().enumerate() {
            let lp = log_softmax(self.logits.row(prompt_len - 1 + i));
            sum += lp[tok as usize];
        }
        SeqLogProb {
            sum,
            avg: sum / target.len() as f64,
            n_tokens: target.len(),
        }
    }
}

/// Scratch for one row of one block.
#[derive(Debug, Clone, Default)]
struct LayerRow {
    ln1: Vec<f64>,
    ln1_hat: Vec<f64>,
    ln1_rstd: f64,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    attn: Vec<f64>,
    x_mid: Vec<f64>,
    ln2: Vec<f64>,
    ln2_hat: Vec<f64>,
    ln2_rstd: f64,
    ff_pre: Vec<f64>,
    ff_act: Vec<f64>,
    ff_out: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct RowScratch {
    x: Vec<f64>,
    layers: Vec<LayerRow>,
    lnf: Vec<f64>,
    lnf_hat: Vec<f64>,
    lnf_rstd: f64,
    logits: Vec<f64>,
}

pub(crate) const LN_EPS: f64 = 1e-5;

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `out = x W + b` with `W` stored `[in, out]`.
#[inline]
pub(crate) fn affine(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n = out.len();
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

/// Returns `rstd`; writes normalized `hat` and `out = hat * g + b`.
#[inline]
fn layer_norm(x: &[f64], g: &[f64], b: &[f64], hat: &mut [f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        hat[i] = (x[i] - mean) * rstd;
        out[i] = hat[i] * g[i] + b[i];
    }
    rstd
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn activate(kind: Nonlinearity, x: f64) -> f64 {
    match kind {
        Nonlinearity::Relu => x.max(0.0),
        Nonlinearity::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
    }
}

#[inline]
pub(crate) fn activate_grad(kind: Nonlinearity, x: f64) -> f64 {
    match kind {
        Nonlinearity::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Nonlinearity::Gelu => {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            let th = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
        }
    }
}

#[inline]
fn round_f32(precision: Precision, v: &mut [f64]) {
    if precision == Precision::F32 {
        for x in v {
            *x = *x as f32 as f64;
        }
    }
}

impl RowScratch {
    fn new(p: &Parameters) -> Self {
        let c = &p.config;
        let d = c.d_model;
        let layer = LayerRow {
            ln1: vec![0.0; d],
            ln1_hat: vec![0.0; d],
            q: vec![0.0; d],
            k: vec![0.0; d],
            v: vec![0.0; d],
            ctx: vec![0.0; d],
            attn: vec![0.0; d],
            x_mid: vec![0.0; d],
            ln2: vec![0.0; d],
            ln2_hat: vec![0.0; d],
            ff_pre: vec![0.0; c.d_ff],
            ff_act: vec![0.0; c.d_ff],
            ff_out: vec![0.0; d],
            ..Default::default()
        };
        Self {
            x: vec![0.0; d],
            layers: vec![layer; c.n_layers],
            lnf: vec![0.0; d],
            lnf_hat: vec![0.0; d],
            lnf_rstd: 0.0,
            logits: vec![0.0; c.vocab_size],
        }
    }
}

impl Parameters {
    /// Computes position `kv.len` for `token`, appending its keys/values.
    /// The caller has already validated the token and the length.
    fn row_forward(&self, token: Token, kv: &mut KvCache, s: &mut RowScratch, mut rec: Option<&mut ForwardCache>) {
        let c = &self.config;
        let lay = self.layout();
        let w = &self.data;
        let d = c.d_model;
        let nh = c.n_heads;
        let hd = c.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let t = kv.len;
        let prec = c.precision;

        let e = &w[lay.tok_emb + token as usize * d..][..d];
        let pe = &w[lay.pos_emb + t * d..][..d];
        for i in 0..d {
            s.x[i] = e[i] + pe[i];
        }
        round_f32(prec, &mut s.x);

        for (l, b) in lay.blocks.iter().enumerate() {
            let r = &mut s.layers[l];
            if let Some(fc) = rec.as_deref_mut() {
                fc.layers[l].x_in[t * d..(t + 1) * d].copy_from_slice(&s.x);
            }
            r.ln1_rstd = layer_norm(&s.x, &w[b.ln1_g..][..d], &w[b.ln1_b..][..d], &mut r.ln1_hat, &mut r.ln1);
            round_f32(prec, &mut r.ln1);
            affine(&r.ln1, &w[b.w_q..][..d * d], &w[b.b_q..][..d], &mut r.q);
            affine(&r.ln1, &w[b.w_k..][..d * d], &w[b.b_k..][..d], &mut r.k);
            affine(&r.ln1, &w[b.w_v..][..d * d], &w[b.b_v..][..d], &mut r.v);
            round_f32(prec, &mut r.q);
            round_f32(prec, &mut r.k);
            round_f32(prec, &mut r.v);
            kv.k[l].extend_from_slice(&r.k);
            kv.v[l].extend_from_slice(&r.v);
            let keys = &kv.k[l];
            let vals = &kv.v[l];
            let n = t + 1;
            r.probs.clear();
            r.probs.resize(nh * n, 0.0);
            r.ctx.fill(0.0);
            for h in 0..nh {
                let qh = &r.q[h * hd..(h + 1) * hd];
                let ph = &mut r.probs[h * n..(h + 1) * n];
                let mut m = f64::NEG_INFINITY;
                for j in 0..n {
                    let kj = &keys[j * d + h * hd..j * d + (h + 1) * hd];
                    ph[j] = dot(qh, kj) * scale;
                    m = m.max(ph[j]);
                }
                let mut z = 0.0;
                for pj in ph.iter_mut() {
                    *pj = (*pj - m).exp();
                    z += *pj;
                }
                let ctx = &mut r.ctx[h * hd..(h + 1) * hd];
                for (j, pj) in ph.iter_mut().enumerate() {
                    *pj /= z;
                    let vj = &vals[j * d + h * hd..j * d + (h + 1) * hd];
                    for (cv, &vv) in ctx.iter_mut().zip(vj) {
                        *cv += *pj * vv;
                    }
                }
            }
            round_f32(prec, &mut r.ctx);
            affine(&r.ctx, &w[b.w_o..][..d * d], &w[b.b_o..][..d], &mut r.attn);
            for i in 0..d {
                r.x_mid[i] = s.x[i] + r.attn[i];
            }
            round_f32(prec, &mut r.x_mid);
            r.ln2_rstd = layer_norm(
                &r.x_mid,
                &w[b.ln2_g..][..d],
                &w[b.ln2_b..][..d],
                &mut r.ln2_hat,
                &mut r.ln2,
            );
            round_f32(prec, &mut r.ln2);
            affine(&r.ln2, &w[b.w_1..][..d * c.d_ff], &w[b.b_1..][..c.d_ff], &mut r.ff_pre);
            round_f32(prec, &mut r.ff_pre);
            for (a, &p) in r.ff_act.iter_mut().zip(&r.ff_pre) {
                *a = activate(c.nonlinearity, p);
            }
            round_f32(prec, &mut r.ff_act);
            affine(&r.ff_act, &w[b.w_2..][..c.d_ff * d], &w[b.b_2..][..d], &mut r.ff_out);
            for i in 0..d {
                s.x[i] = r.x_mid[i] + r.ff_out[i];
            }
            round_f32(prec, &mut s.x);

            if let Some(fc) = rec.as_deref_mut() {
                let lc = &mut fc.layers[l];
                let rows = fc.tokens.len();
                lc.ln1[t * d..(t + 1) * d].copy_from_slice(&r.ln1);
                lc.ln1_hat[t * d..(t + 1) * d].copy_from_slice(&r.ln1_hat);
                lc.ln1_rstd[t] = r.ln1_rstd;
                lc.q[t * d..(t + 1) * d].copy_from_slice(&r.q);
                for h in 0..nh {
                    let dst = h * rows * rows + t * rows;
                    lc.probs[dst..dst + n].copy_from_slice(&r.probs[h * n..(h + 1) * n]);
                }
                lc.ctx[t * d..(t + 1) * d].copy_from_slice(&r.ctx);
                lc.x_mid[t * d..(t + 1) * d].copy_from_slice(&r.x_mid);
                lc.ln2[t * d..(t + 1) * d].copy_from_slice(&r.ln2);
                lc.ln2_hat[t * d..(t + 1) * d].copy_from_slice(&r.ln2_hat);
                lc.ln2_rstd[t] = r.ln2_rstd;
                let f = c.d_ff;
                lc.ff_pre[t * f..(t + 1) * f].copy_from_slice(&r.ff_pre);
                lc.ff_act[t * f..(t + 1) * f].copy_from_slice(&r.ff_act);
            }
        }

        s.lnf_rstd = layer_norm(
            &s.x,
            &w[lay.lnf_g..][..d],
            &w[lay.lnf_b..][..d],
            &mut s.lnf_hat,
            &mut s.lnf,
        );
        round_f32(prec, &mut s.lnf);
        let emb = &w[lay.tok_emb..][..c.vocab_size * d];
        for (v, out) in s.logits.iter_mut().enumerate() {
            *out = dot(&s.lnf, &emb[v * d..(v + 1) * d]);
        }
        round_f32(prec, &mut s.logits);
        kv.len += 1;

        if let Some(fc) = rec {
            fc.lnf[t * d..(t + 1) * d].copy_from_slice(&s.lnf);
            fc.lnf_hat[t * d..(t + 1) * d].copy_from_slice(&s.lnf_hat);
            fc.lnf_rstd[t] = s.lnf_rstd;
            fc.logits.row_mut(t).copy_from_slice(&s.logits);
        }
    }

    /// Logit rows for every position of `tokens`.
    pub fn forward_logits(&self, tokens: &[Token]) -> Result<Logits> {
        Ok(self.forward_cached(tokens)?.logits)
    }

    /// Forward pass that keeps every activation for [`Parameters::backward`].
    pub fn forward_cached(&self, tokens: &[Token]) -> Result<ForwardCache> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let (t_len, d, f) = (tokens.len(), c.d_model, c.d_ff);
        let layer = LayerCache {
            x_in: vec![0.0; t_len * d],
            ln1: vec![0.0; t_len * d],
            ln1_hat: vec![0.0; t_len * d],
            ln1_rstd: vec![0.0; t_len],
            q: vec![0.0; t_len * d],
            probs: vec![0.0; c.n_heads * t_len * t_len],
            ctx: vec![0.0; t_len * d],
            x_mid: vec![0.0; t_len * d],
            ln2: vec![0.0; t_len * d],
            ln2_hat: vec![0.0; t_len * d],
            ln2_rstd: vec![0.0; t_len],
            ff_pre: vec![0.0; t_len * f],
            ff_act: vec![0.0; t_len * f],
        };
        let mut fc = ForwardCache {
            tokens: tokens.to_vec(),
            logits: Logits::zeros(t_len, c.vocab_size),
            layers: vec![layer; c.n_layers],
            kv: KvCache::new(c.n_layers),
            lnf: vec![0.0; t_len * d],
            lnf_hat: vec![0.0; t_len * d],
            lnf_rstd: vec![0.0; t_len],
        };
        let mut kv = KvCache::new(c.n_layers);
        let mut s = RowScratch::new(self);
        for &tok in tokens {
            self.row_forward(tok, &mut kv, &mut s, Some(&mut fc));
        }
        fc.kv = kv;
        Ok(fc)
    }

    /// Incremental decoder positioned at the start of a sequence.
    pub fn decoder(&self) -> DecodeState<'_> {
        DecodeState {
            params: self,
            kv: KvCache::new(self.config.n_layers),
            scratch: RowScratch::new(self),
            tokens: Vec::new(),
        }
    }
}

/// Token-by-token decoder sharing the row kernel with the full forward pass.
#[derive(Debug, Clone)]
pub struct DecodeState<'a> {
    params: &'a Parameters,
    kv: KvCache,
    scratch: RowScratch,
    tokens: Vec<Token>,
}

impl<'a> DecodeState<'a> {
    /// Feeds one token and returns the logit row predicting the next one.
    pub fn push(&mut self, token: Token) -> Result<&[f64]> {
        let c = &self.params.config;
        if self.tokens.len() >= c.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.tokens.len() + 1,
                max: c.max_seq_len,
            });
        }
        if token as usize >= c.vocab_size {
            return Err(Error::TokenOutOfVocab {
                token,
                position: self.tokens.len(),
                vocab: c.vocab_size,
            });
        }
        self.tokens.push(token);
        self.params.row_forward(token, &mut self.kv, &mut self.scratch, None);
        Ok(&self.scratch.logits)
    }

    /// Feeds a whole prefix; returns the last logit row.
    pub fn push_all(&mut self, tokens: &[Token]) -> Result<Vec<f64>> {
        let mut last = Vec::new();
        for &t in tokens {
            last = self.push(t)?.to_vec();
        }
        Ok(last)
    }

    pub fn last_logits(&self) -> &[f64] {
        &self.scratch.logits
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.params.config.max_seq_len - self.tokens.len()
    }
}
