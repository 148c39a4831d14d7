//! Generation: greedy, temperature / nucleus / top-k sampling, groups of
//! independent samples, and beam search.
//!
//! Hypothesis log-likelihoods are always taken under the untempered model,
//! whatever sampler produced the tokens.

use std::cmp::Ordering;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Token, EOS};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{log_softmax, softmax, DecodeState, Parameters};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    /// `None` means unlimited.
    pub top_k: Option<usize>,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.98,
            top_k: None,
            max_new_tokens: 14,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// Sampler for the frozen external model in off-policy calibration.
    pub fn off_policy(max_new_tokens: usize, seed: u64) -> Self {
        Self {
            temperature: 1.3,
            top_p: 0.98,
            top_k: None,
            max_new_tokens,
            seed,
        }
    }

    /// Sampler for on-policy calibration: temperature 1, top-k 5, no nucleus cut.
    pub fn on_policy(max_new_tokens: usize, seed: u64) -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            top_k: Some(5),
            max_new_tokens,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidConfig("top_p must lie in (0, 1]".into()));
        }
        if self.top_k == Some(0) {
            return Err(Error::InvalidConfig("top_k must be >= 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub source_id: String,
    /// Generated target tokens, including the final EOS unless truncated.
    pub tokens: Vec<Token>,
    pub sum_logprob: f64,
    pub avg_logprob: f64,
    pub truncated: bool,
}

impl Hypothesis {
    /// The target text without the trailing EOS.
    pub fn output(&self) -> &[Token] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    fn from_tokens(source_id: &str, tokens: Vec<Token>, sum: f64, truncated: bool) -> Self {
        let n = tokens.len().max(1) as f64;
        Self {
            source_id: source_id.to_string(),
            avg_logprob: sum / n,
            tokens,
            sum_logprob: sum,
            truncated,
        }
    }

    /// Ranking key used by beam search.
    pub fn beam_key(&self, length_penalty: f64) -> f64 {
        if length_penalty == 0.0 {
            self.sum_logprob
        } else {
            self.sum_logprob / (self.tokens.len() as f64).powf(length_penalty)
        }
    }
}

/// One line of a persisted hypothesis pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    #[serde(flatten)]
    pub hypothesis: Hypothesis,
    pub sampler: SamplerConfig,
}

pub fn save_pool(path: &Path, groups: &[Vec<Hypothesis>], sampler: &SamplerConfig) -> Result<()> {
    let rows: Vec<PoolRecord> = groups
        .iter()
        .flatten()
        .map(|h| PoolRecord {
            hypothesis: h.clone(),
            sampler: sampler.clone(),
        })
        .collect();
    io::write_jsonl(path, &rows)
}

/// Reads a pool back, grouping consecutive rows by `source_id`.
pub fn load_pool(path: &Path) -> Result<Vec<Vec<Hypothesis>>> {
    let rows: Vec<PoolRecord> = io::read_jsonl(path)?;
    let mut groups: Vec<Vec<Hypothesis>> = Vec::new();
    for r in rows {
        match groups.last_mut() {
            Some(g) if g[0].source_id == r.hypothesis.source_id => g.push(r.hypothesis),
            _ => groups.push(vec![r.hypothesis]),
        }
    }
    Ok(groups)
}

/// Tokens eligible at one sampling step, most probable first, with their
/// renormalized probabilities.
pub fn nucleus(logits: &[f64], temperature: f64, top_p: f64, top_k: Option<usize>) -> Vec<(Token, f64)> {
    let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    let probs = softmax(&scaled);
    let mut order: Vec<(Token, f64)> = probs.iter().enumerate().map(|(i, &p)| (i as Token, p)).collect();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    let mut keep = order.len();
    if top_p < 1.0 {
        let mut cum = 0.0;
        for (i, (_, p)) in order.iter().enumerate() {
            cum += p;
            // the token that crosses the threshold is included
            if cum >= top_p {
                keep = i + 1;
                break;
            }
        }
    }
    if let Some(k) = top_k {
        keep = keep.min(k);
    }
    order.truncate(keep);
    let z: f64 = order.iter().map(|(_, p)| p).sum();
    for (_, p) in &mut order {
        *p /= z;
    }
    order
}

fn effective_budget(params: &Parameters, prompt_len: usize, max_new_tokens: usize) -> usize {
    // the last generated token is never fed back, hence the +1
    let room = (params.config.max_seq_len + 1).saturating_sub(prompt_len);
    max_new_tokens.min(room)
}

/// Candidate sets seen at each step, for membership checks.
pub type StepTrace = Vec<Vec<(Token, f64)>>;

fn sample_inner(
    params: &Parameters,
    prompt: &[Token],
    cfg: &SamplerConfig,
    seed: u64,
    source_id: &str,
    mut trace: Option<&mut StepTrace>,
) -> Result<Hypothesis> {
    cfg.validate()?;
    let mut r = rng::rng(seed);
    let mut dec = params.decoder();
    let mut logits = dec.push_all(prompt)?;
    let budget = effective_budget(params, prompt.len(), cfg.max_new_tokens);
    let mut tokens = Vec::new();
    let mut sum = 0.0;
    loop {
        let cands = nucleus(&logits, cfg.temperature, cfg.top_p, cfg.top_k);
        let u: f64 = r.random();
        let mut acc = 0.0;
        let mut chosen = cands[cands.len() - 1].0;
        for &(tok, p) in &cands {
            acc += p;
            if u < acc {
                chosen = tok;
                break;
            }
        }
        assert!(cands.iter().any(|&(t, _)| t == chosen), "sampled token outside nucleus");
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(cands);
        }
        sum += log_softmax(&logits)[chosen as usize];
        tokens.push(chosen);
        if chosen == EOS {
            return Ok(Hypothesis::from_tokens(source_id, tokens, sum, false));
        }
        if tokens.len() >= budget {
            return Ok(Hypothesis::from_tokens(source_id, tokens, sum, true));
        }
        logits = dec.push(chosen)?.to_vec();
    }
}

/// One sample seeded by `cfg.seed`.
pub fn sample(params: &Parameters, prompt: &[Token], cfg: &SamplerConfig) -> Result<Hypothesis> {
    sample_inner(params, prompt, cfg, cfg.seed, "", None)
}

/// One sample with an explicit seed; used for group draws.
pub fn sample_with_seed(
    params: &Parameters,
    prompt: &[Token],
    cfg: &SamplerConfig,
    seed: u64,
    source_id: &str,
) -> Result<Hypothesis> {
    sample_inner(params, prompt, cfg, seed, source_id, None)
}

/// Like [`sample`], also returning the candidate set of every step.
pub fn sample_traced(params: &Parameters, prompt: &[Token], cfg: &SamplerConfig) -> Result<(Hypothesis, StepTrace)> {
    let mut trace = Vec::new();
    let h = sample_inner(params, prompt, cfg, cfg.seed, "", Some(&mut trace))?;
    Ok((h, trace))
}

/// `k` independent draws; draw `i` is seeded from `(cfg.seed, source_id, i)`.
/// Duplicates are kept.
pub fn sample_group(
    params: &Parameters,
    source_id: &str,
    prompt: &[Token],
    cfg: &SamplerConfig,
    k: usize,
) -> Result<Vec<Hypothesis>> {
    (0..k)
        .map(|i| sample_with_seed(params, prompt, cfg, rng::draw_seed(cfg.seed, source_id, i), source_id))
        .collect()
}

/// Number of hypotheses that repeat an earlier one in the group.
pub fn duplicate_count(group: &[Hypothesis]) -> usize {
    let mut seen = std::collections::BTreeSet::new();
    group.iter().filter(|h| !seen.insert(h.tokens.clone())).count()
}

fn argmax(row: &[f64]) -> Token {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as Token
}

/// Greedy decoding; ties go to the lowest token id.
pub fn greedy(params: &Parameters, source_id: &str, prompt: &[Token], max_new_tokens: usize) -> Result<Hypothesis> {
    let mut dec = params.decoder();
    let mut logits = dec.push_all(prompt)?;
    let budget = effective_budget(params, prompt.len(), max_new_tokens);
    let mut tokens = Vec::new();
    let mut sum = 0.0;
    loop {
        let tok = argmax(&logits);
        sum += log_softmax(&logits)[tok as usize];
        tokens.push(tok);
        if tok == EOS {
            return Ok(Hypothesis::from_tokens(source_id, tokens, sum, false));
        }
        if tokens.len() >= budget {
            return Ok(Hypothesis::from_tokens(source_id, tokens, sum, true));
        }
        logits = dec.push(tok)?.to_vec();
    }
}

#[derive(Clone)]
struct Beam<'a> {
    state: DecodeState<'a>,
    tokens: Vec<Token>,
    sum: f64,
}

/// Orders by key descending, then by token sequence ascending.
fn rank(a_key: f64, a_toks: &[Token], b_key: f64, b_toks: &[Token]) -> Ordering {
    b_key
        .partial_cmp(&a_key)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_toks.cmp(b_toks))
}

/// Beam search over EOS-terminated continuations, ranked by
/// `sum_logprob / len^length_penalty`. Falls back to the truncated live
/// beams only when nothing finished within the budget.
pub fn beam_search(
    params: &Parameters,
    source_id: &str,
    prompt: &[Token],
    beam: usize,
    length_penalty: f64,
    max_new_tokens: usize,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Precondition("beam must be >= 1".into()));
    }
    let mut root = params.decoder();
    root.push_all(prompt)?;
    let budget = effective_budget(params, prompt.len(), max_new_tokens);
    let mut live = vec![Beam {
        state: root,
        tokens: Vec::new(),
        sum: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..budget {
        let mut cands: Vec<(usize, Token, f64, Vec<Token>)> = Vec::with_capacity(live.len() * params.config.vocab_size);
        for (bi, b) in live.iter().enumerate() {
            let lp = log_softmax(b.state.last_logits());
            for (tok, &l) in lp.iter().enumerate() {
                let mut toks = b.tokens.clone();
                toks.push(tok as Token);
                cands.push((bi, tok as Token, b.sum + l, toks));
            }
        }
        cands.sort_by(|a, b| rank(a.2, &a.3, b.2, &b.3));
        let last_step = step + 1 == budget;
        let mut next = Vec::with_capacity(beam);
        for (r, (bi, tok, sum, toks)) in cands.into_iter().enumerate() {
            if tok == EOS {
                if r < beam {
                    finished.push(Hypothesis::from_tokens(source_id, toks, sum, false));
                }
                continue;
            }
            if next.len() < beam {
                let mut state = live[bi].state.clone();
                if !last_step {
                    state.push(tok)?;
                }
                next.push(Beam {
                    state,
                    tokens: toks,
                    sum,
                });
            } else if r >= beam {
                break;
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        // sums only decrease, so with no length penalty a full finished set
        // that beats every live beam is final
        if length_penalty == 0.0 && finished.len() >= beam {
            finished.sort_by(|a, b| rank(a.beam_key(0.0), &a.tokens, b.beam_key(0.0), &b.tokens));
            let worst_kept = finished[beam - 1].sum_logprob;
            let best_live = live.iter().map(|b| b.sum).fold(f64::NEG_INFINITY, f64::max);
            if best_live <= worst_kept {
                break;
            }
        }
    }

    let mut out = if finished.is_empty() {
        live.into_iter()
            .map(|b| Hypothesis::from_tokens(source_id, b.tokens, b.sum, true))
            .collect()
    } else {
        finished
    };
    out.sort_by(|a, b| {
        rank(
            a.beam_key(length_penalty),
            &a.tokens,
            b.beam_key(length_penalty),
            &b.tokens,
        )
    });
    out.truncate(beam);
    debug_assert!(out
        .windows(2)
        .all(|w| w[0].beam_key(length_penalty) >= w[1].beam_key(length_penalty)));
    Ok(out)
}

/// Top hypothesis of a beam search.
pub fn beam_decode(
    params: &Parameters,
    source_id: &str,
    prompt: &[Token],
    beam: usize,
    max_new_tokens: usize,
) -> Result<Hypothesis> {
    Ok(beam_search(params, source_id, prompt, beam, 0.0, max_new_tokens)?.remove(0))
}
