//! Reverse-mode gradients for the transformer, hand-derived per layer.

use super::forward::{activate_grad, dot, ForwardCache, Logits};
use super::{first_non_finite, Gradients, Parameters};
use crate::corpus::Token;
use crate::error::{Error, Result};

/// `dW += x^T dy`, `db += dy` for a single row.
#[inline]
fn accum_affine(x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64]) {
    let n = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut dw[i * n..(i + 1) * n];
        for (g, &d) in row.iter_mut().zip(dy) {
            *g += xi * d;
        }
    }
    for (g, &d) in db.iter_mut().zip(dy) {
        *g += d;
    }
}

/// `dx[i] += W[i,:] . dy` for a single row.
#[inline]
fn accum_input(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let n = dy.len();
    for (i, o) in dx.iter_mut().enumerate() {
        *o += dot(&w[i * n..(i + 1) * n], dy);
    }
}

/// Layer-norm backward for one row; adds into `dx`, `dg`, `db`.
#[inline]
fn layer_norm_back(dy: &[f64], hat: &[f64], rstd: f64, g: &[f64], dg: &mut [f64], db: &mut [f64], dx: &mut [f64]) {
    let n = dy.len() as f64;
    let mut mean_dhat = 0.0;
    let mut mean_dhat_hat = 0.0;
    for i in 0..dy.len() {
        dg[i] += dy[i] * hat[i];
        db[i] += dy[i];
        let dh = dy[i] * g[i];
        mean_dhat += dh;
        mean_dhat_hat += dh * hat[i];
    }
    mean_dhat /= n;
    mean_dhat_hat /= n;
    for i in 0..dy.len() {
        let dh = dy[i] * g[i];
        dx[i] += rstd * (dh - mean_dhat - hat[i] * mean_dhat_hat);
    }
}

impl Parameters {
    /// Accumulates `d loss / d params` into `grad` given `d loss / d logits`.
    pub fn backward(&self, fc: &ForwardCache, dlogits: &Logits, grad: &mut Gradients) {
        let c = &self.config;
        let lay = self.layout();
        let w = &self.data;
        let g = &mut grad.data;
        let (d, f, v_size, nh, hd) = (c.d_model, c.d_ff, c.vocab_size, c.n_heads, c.head_dim());
        let t_len = fc.tokens.len();
        let scale = 1.0 / (hd as f64).sqrt();

        // tied output projection and final norm
        let mut dx = vec![0.0; t_len * d];
        let mut dnorm = vec![0.0; d];
        for t in 0..t_len {
            let dl = dlogits.row(t);
            if dl.iter().all(|&x| x == 0.0) {
                continue;
            }
            let lnf = &fc.lnf[t * d..(t + 1) * d];
            dnorm.fill(0.0);
            for v in 0..v_size {
                let s = dl[v];
                if s == 0.0 {
                    continue;
                }
                let e = &w[lay.tok_emb + v * d..][..d];
                let ge = &mut g[lay.tok_emb + v * d..][..d];
                for i in 0..d {
                    ge[i] += s * lnf[i];
                    dnorm[i] += s * e[i];
                }
            }
            let (dg, db) = two_mut(g, lay.lnf_g, lay.lnf_b, d);
            layer_norm_back(
                &dnorm,
                &fc.lnf_hat[t * d..(t + 1) * d],
                fc.lnf_rstd[t],
                &w[lay.lnf_g..][..d],
                dg,
                db,
                &mut dx[t * d..(t + 1) * d],
            );
        }

        let mut dff = vec![0.0; f];
        let mut dln = vec![0.0; d];
        for (l, b) in lay.blocks.iter().enumerate().rev() {
            let lc = &fc.layers[l];
            let keys = &fc.kv.k[l];
            let vals = &fc.kv.v[l];

            // feed-forward: x_out = x_mid + W2 act(W1 ln2(x_mid) + b1) + b2
            let mut dmid = dx.clone();
            for t in 0..t_len {
                let dy = &dx[t * d..(t + 1) * d];
                let act = &lc.ff_act[t * f..(t + 1) * f];
                {
                    let (dw2, db2) = split_wb(g, b.w_2, b.b_2, f * d, d);
                    accum_affine(act, dy, dw2, db2);
                }
                dff.fill(0.0);
                accum_input(&w[b.w_2..][..f * d], dy, &mut dff);
                for (k, x) in dff.iter_mut().enumerate() {
                    *x *= activate_grad(c.nonlinearity, lc.ff_pre[t * f + k]);
                }
                {
                    let (dw1, db1) = split_wb(g, b.w_1, b.b_1, d * f, f);
                    accum_affine(&lc.ln2[t * d..(t + 1) * d], &dff, dw1, db1);
                }
                dln.fill(0.0);
                accum_input(&w[b.w_1..][..d * f], &dff, &mut dln);
                let (dg, dbb) = two_mut(g, b.ln2_g, b.ln2_b, d);
                layer_norm_back(
                    &dln,
                    &lc.ln2_hat[t * d..(t + 1) * d],
                    lc.ln2_rstd[t],
                    &w[b.ln2_g..][..d],
                    dg,
                    dbb,
                    &mut dmid[t * d..(t + 1) * d],
                );
            }

            // attention output projection: x_mid = x_in + W_o ctx + b_o
            let mut dxin = dmid.clone();
            let mut dctx = vec![0.0; t_len * d];
            for t in 0..t_len {
                let dy = &dmid[t * d..(t + 1) * d];
                let (dwo, dbo) = split_wb(g, b.w_o, b.b_o, d * d, d);
                accum_affine(&lc.ctx[t * d..(t + 1) * d], dy, dwo, dbo);
                accum_input(&w[b.w_o..][..d * d], dy, &mut dctx[t * d..(t + 1) * d]);
            }

            // scaled dot-product attention
            let mut dq = vec![0.0; t_len * d];
            let mut dk = vec![0.0; t_len * d];
            let mut dv = vec![0.0; t_len * d];
            let mut dp = vec![0.0; t_len];
            for h in 0..nh {
                let hs = h * hd..(h + 1) * hd;
                for t in 0..t_len {
                    let probs = &lc.probs[h * t_len * t_len + t * t_len..][..t + 1];
                    let dc = &dctx[t * d + hs.start..t * d + hs.end];
                    let mut weighted = 0.0;
                    for j in 0..=t {
                        let vj = &vals[j * d + hs.start..j * d + hs.end];
                        dp[j] = dot(dc, vj);
                        weighted += probs[j] * dp[j];
                        let dvj = &mut dv[j * d + hs.start..j * d + hs.end];
                        for (a, &x) in dvj.iter_mut().zip(dc) {
                            *a += probs[j] * x;
                        }
                    }
                    for j in 0..=t {
                        let ds = probs[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &keys[j * d + hs.start..j * d + hs.end];
                        let qt = &lc.q[t * d + hs.start..t * d + hs.end];
                        for i in 0..hd {
                            dq[t * d + hs.start + i] += ds * kj[i];
                            dk[j * d + hs.start + i] += ds * qt[i];
                        }
                    }
                }
            }

            // q/k/v projections and the first norm
            for t in 0..t_len {
                let ln1 = &lc.ln1[t * d..(t + 1) * d];
                let rows = t * d..(t + 1) * d;
                dln.fill(0.0);
                for (wo, bo, dy) in [
                    (b.w_q, b.b_q, &dq[rows.clone()]),
                    (b.w_k, b.b_k, &dk[rows.clone()]),
                    (b.w_v, b.b_v, &dv[rows.clone()]),
                ] {
                    let (dw, db) = split_wb(g, wo, bo, d * d, d);
                    accum_affine(ln1, dy, dw, db);
                    accum_input(&w[wo..][..d * d], dy, &mut dln);
                }
                let (dg, dbb) = two_mut(g, b.ln1_g, b.ln1_b, d);
                layer_norm_back(
                    &dln,
                    &lc.ln1_hat[rows.clone()],
                    lc.ln1_rstd[t],
                    &w[b.ln1_g..][..d],
                    dg,
                    dbb,
                    &mut dxin[rows],
                );
            }
            dx = dxin;
        }

        for (t, &tok) in fc.tokens.iter().enumerate() {
            let src = &dx[t * d..(t + 1) * d];
            let ge = &mut g[lay.tok_emb + tok as usize * d..][..d];
            for (a, &x) in ge.iter_mut().zip(src) {
                *a += x;
            }
            let gp = &mut g[lay.pos_emb + t * d..][..d];
            for (a, &x) in gp.iter_mut().zip(src) {
                *a += x;
            }
        }
    }

    /// Fills `dlogits` with `coeff * d(sum log p(target)) / d logits` for
    /// the rows of a cache built by [`Parameters::forward_target`].
    pub fn target_logprob_dlogits(
        &self,
        fc: &ForwardCache,
        prompt_len: usize,
        target: &[Token],
        coeff: f64,
        dlogits: &mut Logits,
    ) {
        for (i, &tok) in target.iter().enumerate() {
            let r = prompt_len - 1 + i;
            let p = super::softmax(fc.logits.row(r));
            let row = dlogits.row_mut(r);
            for (v, (dl, pv)) in row.iter_mut().zip(p).enumerate() {
                let onehot = if v == tok as usize { 1.0 } else { 0.0 };
                *dl += coeff * (onehot - pv);
            }
        }
    }
}

fn split_wb(g: &mut [f64], w_off: usize, b_off: usize, w_len: usize, b_len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(w_off + w_len, b_off);
    let (a, rest) = g[w_off..].split_at_mut(w_len);
    (a, &mut rest[..b_len])
}

fn two_mut(g: &mut [f64], first: usize, second: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(first + len, second);
    let (a, rest) = g[first..].split_at_mut(len);
    (a, &mut rest[..len])
}

/// Runs `loss_fn` on the logits of `tokens` and returns the loss together
/// with its gradient for every parameter.
pub fn grad<F>(params: &Parameters, tokens: &[Token], loss_fn: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&Logits) -> (f64, Logits),
{
    let fc = params.forward_cached(tokens)?;
    let (loss, dlogits) = loss_fn(&fc.logits);
    if !loss.is_finite() {
        let tensor = params
            .first_non_finite()
            .map(|n| format!("parameter {n}"))
            .or_else(|| {
                fc.logits
                    .data
                    .iter()
                    .any(|v| !v.is_finite())
                    .then(|| "logits".to_string())
            })
            .unwrap_or_else(|| "loss".into());
        return Err(Error::NonFinite { tensor });
    }
    if dlogits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            tensor: "dlogits".into(),
        });
    }
    let mut g = params.zeros_like();
    params.backward(&fc, &dlogits, &mut g);
    if let Some(name) = first_non_finite(params.layout(), &g.data) {
        return Err(Error::NonFinite {
            tensor: format!("gradient of {name}"),
        });
    }
    Ok((loss, g))
}
