//! Sequence-level objectives over groups of sampled hypotheses.
//!
//! The calibration loss is the negative Pearson correlation between the
//! model's log-likelihoods `z` and oracle quality scores `q` within one
//! group, plus an SFT term on the group's best hypothesis:
//!
//! ```text
//! L_pearson = -(1/k) sum_i ((z_i - mu_z) / sigma_z) * ((q_i - mu_q) / sigma_q)
//! L_cal     = L_pearson + w * L_sft
//! ```
//!
//! Statistics use population (divide-by-k) estimators, so `L_pearson` is
//! exactly minus the sample Pearson coefficient and lies in `[-1, 1]`.
//! `q` is a constant; gradients flow through `z`, `mu_z` and `sigma_z`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{render_prompt, Pair, Token};
use crate::decode::Hypothesis;
use crate::error::{Error, Result};
use crate::metastats::{mean_std, DEGENERATE_EPS};
use crate::model::{ForwardCache, Gradients, Logits, Parameters};

/// Which log-likelihood enters the Pearson term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ZMode {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Mle,
    SftBon,
    CpoLike,
    Calibration,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::Mle => "mle",
            Objective::SftBon => "sft_bon",
            Objective::CpoLike => "cpo_like",
            Objective::Calibration => "calibration",
        }
    }
}

/// `k` log-likelihoods and quality scores for one source, with their
/// group statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisGroup {
    pub source_id: String,
    pub k: usize,
    pub z: Vec<f64>,
    pub q: Vec<f64>,
    pub mu_z: f64,
    pub sigma_z: f64,
    pub mu_q: f64,
    pub sigma_q: f64,
    /// First index of `max(q)`.
    pub best_index: usize,
    /// First index of `min(q)`.
    pub worst_index: usize,
}

impl HypothesisGroup {
    pub fn new(source_id: impl Into<String>, z: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if z.len() != q.len() {
            return Err(Error::LengthMismatch {
                left: z.len(),
                right: q.len(),
            });
        }
        if z.len() < 2 {
            return Err(Error::Precondition(format!("group needs k >= 2, got {}", z.len())));
        }
        if z.iter().chain(&q).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: "group z/q".into(),
            });
        }
        let (mu_z, sigma_z) = mean_std(&z);
        let (mu_q, sigma_q) = mean_std(&q);
        let mut best_index = 0;
        let mut worst_index = 0;
        for (i, &v) in q.iter().enumerate() {
            if v > q[best_index] {
                best_index = i;
            }
            if v < q[worst_index] {
                worst_index = i;
            }
        }
        Ok(Self {
            source_id: source_id.into(),
            k: z.len(),
            z,
            q,
            mu_z,
            sigma_z,
            mu_q,
            sigma_q,
            best_index,
            worst_index,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.sigma_z < DEGENERATE_EPS || self.sigma_q < DEGENERATE_EPS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PearsonLoss {
    pub loss: f64,
    pub dloss_dz: Vec<f64>,
    /// Set when the group was skipped as degenerate.
    pub skipped: bool,
}

/// Negative Pearson correlation of `(z, q)` and its exact gradient in `z`.
///
/// With standardized `u = (z - mu_z)/sigma_z`, `v = (q - mu_q)/sigma_q` and
/// `r = (1/k) u.v`, the gradient is `dL/dz = -(v - r u) / (k sigma_z)`.
/// Degenerate groups return zero loss and gradient.
pub fn pearson_loss(g: &HypothesisGroup) -> PearsonLoss {
    let k = g.k as f64;
    if g.is_degenerate() {
        return PearsonLoss {
            loss: 0.0,
            dloss_dz: vec![0.0; g.k],
            skipped: true,
        };
    }
    let u: Vec<f64> = g.z.iter().map(|z| (z - g.mu_z) / g.sigma_z).collect();
    let v: Vec<f64> = g.q.iter().map(|q| (q - g.mu_q) / g.sigma_q).collect();
    // (1/k) u.v in covariance form, which is exact for perfectly linear groups
    let (mut czq, mut czz, mut cqq) = (0.0, 0.0, 0.0);
    for (z, q) in g.z.iter().zip(&g.q) {
        let (a, b) = (z - g.mu_z, q - g.mu_q);
        czq += a * b;
        czz += a * a;
        cqq += b * b;
    }
    let r = (czq / (czz * cqq).sqrt()).clamp(-1.0, 1.0);
    let dloss_dz = u
        .iter()
        .zip(&v)
        .map(|(ui, vi)| -(vi - r * ui) / (k * g.sigma_z))
        .collect();
    PearsonLoss {
        loss: -r,
        dloss_dz,
        skipped: false,
    }
}

/// Pearson correlation as a dot product of mean-centered, unit-norm vectors.
/// Kept as an independent cross-check of [`pearson_loss`].
pub fn pearson_dot_form(g: &HypothesisGroup) -> Result<f64> {
    fn unit_centered(x: &[f64]) -> Option<Vec<f64>> {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        // same threshold as the loss, on the population scale
        if norm / (x.len() as f64).sqrt() < DEGENERATE_EPS {
            return None;
        }
        Some(c.into_iter().map(|v| v / norm).collect())
    }
    let degenerate = || Error::Degenerate(format!("group {} has a constant column", g.source_id));
    let x = unit_centered(&g.z).ok_or_else(degenerate)?;
    let y = unit_centered(&g.q).ok_or_else(degenerate)?;
    Ok(x.iter().zip(&y).map(|(a, b)| a * b).sum())
}

/// `-log sigmoid(x)`, computed stably.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Preference term `-log sigmoid(beta (zw - zl))` and its derivatives
/// with respect to `zw` and `zl`.
pub fn preference_term(zw: f64, zl: f64, beta: f64) -> (f64, f64, f64) {
    let x = beta * (zw - zl);
    let s = sigmoid(-x);
    (neg_log_sigmoid(x), -beta * s, beta * s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    /// `pearson`, `sft`, `preference` (unweighted).
    pub components: BTreeMap<String, f64>,
    pub sft_weight: f64,
    pub skipped_groups: usize,
}

impl LossValue {
    pub fn new(pearson: f64, sft: f64, preference: f64, sft_weight: f64, skipped_groups: usize) -> Self {
        let components = BTreeMap::from([
            ("pearson".to_string(), pearson),
            ("sft".to_string(), sft),
            ("preference".to_string(), preference),
        ]);
        Self {
            total: pearson + sft_weight * sft + preference,
            components,
            sft_weight,
            skipped_groups,
        }
    }

    pub fn component(&self, name: &str) -> f64 {
        self.components.get(name).copied().unwrap_or(0.0)
    }
}

/// Hypotheses of one source with frozen quality scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredGroup {
    pub source_id: String,
    pub hypotheses: Vec<Hypothesis>,
    pub q: Vec<f64>,
}

impl ScoredGroup {
    pub fn new(hypotheses: Vec<Hypothesis>, q: Vec<f64>) -> Result<Self> {
        if hypotheses.len() != q.len() {
            return Err(Error::LengthMismatch {
                left: hypotheses.len(),
                right: q.len(),
            });
        }
        let source_id = hypotheses
            .first()
            .map(|h| h.source_id.clone())
            .ok_or_else(|| Error::Precondition("empty group".into()))?;
        Ok(Self {
            source_id,
            hypotheses,
            q,
        })
    }

    /// The first `k` hypotheses.
    pub fn truncated(&self, k: usize) -> Self {
        Self {
            source_id: self.source_id.clone(),
            hypotheses: self.hypotheses[..k.min(self.hypotheses.len())].to_vec(),
            q: self.q[..k.min(self.q.len())].to_vec(),
        }
    }

    fn extreme_indices(&self) -> (usize, usize) {
        let (mut best, mut worst) = (0, 0);
        for (i, &v) in self.q.iter().enumerate() {
            if v > self.q[best] {
                best = i;
            }
            if v < self.q[worst] {
                worst = i;
            }
        }
        (best, worst)
    }
}

/// Knobs shared by the group objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub sft_weight: f64,
    pub z_mode: ZMode,
    pub cpo_beta: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            sft_weight: 1.0,
            z_mode: ZMode::Sum,
            cpo_beta: 0.1,
        }
    }
}

struct Scored {
    cache: ForwardCache,
    sum: f64,
    avg: f64,
    n: usize,
}

fn score_target(params: &Parameters, prompt: &[Token], target: &[Token]) -> Result<Scored> {
    let cache = params.forward_target(prompt, target)?;
    let s = cache.target_score(prompt.len(), target);
    Ok(Scored {
        cache,
        sum: s.sum,
        avg: s.avg,
        n: s.n_tokens,
    })
}

fn backprop_target(
    params: &Parameters,
    s: &Scored,
    prompt_len: usize,
    target: &[Token],
    coeff: f64,
    grad: &mut Gradients,
) {
    if coeff == 0.0 {
        return;
    }
    let mut dl = Logits::zeros(s.cache.logits.rows, s.cache.logits.vocab);
    params.target_logprob_dlogits(&s.cache, prompt_len, target, coeff, &mut dl);
    params.backward(&s.cache, &dl, grad);
}

/// Token-mean negative log-likelihood of `target` (ends in EOS unless it is
/// a truncated hypothesis).
pub fn nll(params: &Parameters, prompt: &[Token], target: &[Token]) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::Precondition("empty target".into()));
    }
    Ok(-params.target_logprob(prompt, target)?.avg)
}

/// [`nll`] and its gradient.
pub fn nll_grad(params: &Parameters, prompt: &[Token], target: &[Token]) -> Result<(f64, Gradients)> {
    if target.is_empty() {
        return Err(Error::Precondition("empty target".into()));
    }
    let s = score_target(params, prompt, target)?;
    let mut g = params.zeros_like();
    backprop_target(params, &s, prompt.len(), target, -1.0 / s.n as f64, &mut g);
    Ok((-s.avg, g))
}

/// SFT regularizer: token-mean NLL of the best hypothesis.
pub fn sft_loss(params: &Parameters, pair: &Pair, best: &Hypothesis) -> Result<f64> {
    nll(params, &render_prompt(pair)?, &best.tokens)
}

/// Token-mean NLL of the reference followed by EOS.
pub fn mle_target(pair: &Pair) -> Vec<Token> {
    let mut t = pair.reference.clone();
    t.push(crate::corpus::EOS);
    t
}

/// Loss of one group under `objective`, optionally with the parameter
/// gradient. `z` is always recomputed under `params`.
pub fn group_loss(
    params: &Parameters,
    pair: &Pair,
    group: &ScoredGroup,
    objective: Objective,
    opts: &LossOptions,
    want_grad: bool,
) -> Result<(LossValue, Option<Gradients>)> {
    if group.source_id != pair.id {
        return Err(Error::Precondition(format!(
            "group {} scored against pair {}",
            group.source_id, pair.id
        )));
    }
    let prompt = render_prompt(pair)?;
    let plen = prompt.len();
    let hyps = &group.hypotheses;
    let mut grad = want_grad.then(|| params.zeros_like());
    match objective {
        Objective::Mle => {
            let target = mle_target(pair);
            let s = score_target(params, &prompt, &target)?;
            if let Some(g) = grad.as_mut() {
                backprop_target(params, &s, plen, &target, -1.0 / s.n as f64, g);
            }
            Ok((LossValue::new(0.0, -s.avg, 0.0, 1.0, 0), grad))
        }
        Objective::SftBon => {
            if hyps.is_empty() {
                return Err(Error::Precondition("empty group".into()));
            }
            let (best, _) = group.extreme_indices();
            let s = score_target(params, &prompt, &hyps[best].tokens)?;
            if let Some(g) = grad.as_mut() {
                backprop_target(params, &s, plen, &hyps[best].tokens, -opts.sft_weight / s.n as f64, g);
            }
            Ok((LossValue::new(0.0, -s.avg, 0.0, opts.sft_weight, 0), grad))
        }
        Objective::CpoLike => {
            if hyps.len() < 2 {
                return Err(Error::Precondition("cpo_like needs k >= 2".into()));
            }
            let (best, worst) = group.extreme_indices();
            let sw = score_target(params, &prompt, &hyps[best].tokens)?;
            let sft = -sw.avg;
            if best == worst {
                if let Some(g) = grad.as_mut() {
                    backprop_target(params, &sw, plen, &hyps[best].tokens, -opts.sft_weight / sw.n as f64, g);
                }
                return Ok((LossValue::new(0.0, sft, 0.0, opts.sft_weight, 1), grad));
            }
            let sl = score_target(params, &prompt, &hyps[worst].tokens)?;
            let (pref, dzw, dzl) = preference_term(sw.avg, sl.avg, opts.cpo_beta);
            if let Some(g) = grad.as_mut() {
                let cw = (dzw - opts.sft_weight) / sw.n as f64;
                backprop_target(params, &sw, plen, &hyps[best].tokens, cw, g);
                backprop_target(params, &sl, plen, &hyps[worst].tokens, dzl / sl.n as f64, g);
            }
            Ok((LossValue::new(0.0, sft, pref, opts.sft_weight, 0), grad))
        }
        Objective::Calibration => {
            let scored = hyps
                .iter()
                .map(|h| score_target(params, &prompt, &h.tokens))
                .collect::<Result<Vec<_>>>()?;
            let z: Vec<f64> = scored
                .iter()
                .map(|s| match opts.z_mode {
                    ZMode::Sum => s.sum,
                    ZMode::Mean => s.avg,
                })
                .collect();
            let hg = HypothesisGroup::new(group.source_id.clone(), z, group.q.clone())?;
            let pl = pearson_loss(&hg);
            let best = hg.best_index;
            let sft = -scored[best].avg;
            if let Some(g) = grad.as_mut() {
                for (i, s) in scored.iter().enumerate() {
                    let dz = match opts.z_mode {
                        ZMode::Sum => pl.dloss_dz[i],
                        ZMode::Mean => pl.dloss_dz[i] / s.n as f64,
                    };
                    let mut coeff = dz;
                    if i == best {
                        coeff -= opts.sft_weight / s.n as f64;
                    }
                    backprop_target(params, s, plen, &hyps[i].tokens, coeff, g);
                }
            }
            Ok((
                LossValue::new(pl.loss, sft, 0.0, opts.sft_weight, usize::from(pl.skipped)),
                grad,
            ))
        }
    }
}

/// Calibration loss `L_pearson + w * L_sft` of one group.
pub fn cal_loss(params: &Parameters, pair: &Pair, group: &ScoredGroup, opts: &LossOptions) -> Result<LossValue> {
    Ok(group_loss(params, pair, group, Objective::Calibration, opts, false)?.0)
}

pub fn cal_loss_grad(
    params: &Parameters,
    pair: &Pair,
    group: &ScoredGroup,
    opts: &LossOptions,
) -> Result<(LossValue, Gradients)> {
    let (v, g) = group_loss(params, pair, group, Objective::Calibration, opts, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// CPO-like baseline: preference between the best and worst hypotheses
/// (token-mean log-likelihoods) plus SFT on the best.
pub fn cpo_like_loss(params: &Parameters, pair: &Pair, group: &ScoredGroup, opts: &LossOptions) -> Result<LossValue> {
    Ok(group_loss(params, pair, group, Objective::CpoLike, opts, false)?.0)
}
