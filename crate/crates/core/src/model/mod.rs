//! Decoder-only pre-norm transformer with tied embeddings and learned
//! positions, written against flat `f64` parameter storage.
//!
//! All parameters live in one contiguous vector; [`Layout`] names the
//! tensors inside it. Gradients use the same layout, which keeps the
//! optimizer, checkpointing and finite-difference checks trivial.

mod backward;
mod checkpoint;
mod forward;

pub use backward::grad;
pub use checkpoint::{params_hash, Checkpoint, Provenance, FORMAT_VERSION};
pub use forward::{DecodeState, ForwardCache, Logits};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Token, EOS};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Relu,
    #[default]
    Gelu,
}

/// Arithmetic mode. `F32` rounds parameters and every activation row to
/// single precision while still running the kernels in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub init_scale: f64,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    #[serde(default)]
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 36,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 32,
            init_scale: 0.05,
            nonlinearity: Nonlinearity::Gelu,
            precision: Precision::F64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidConfig("init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_params(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of one block's tensors.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_q: usize,
    pub b_q: usize,
    pub w_k: usize,
    pub b_k: usize,
    pub w_v: usize,
    pub b_v: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_1: usize,
    pub b_1: usize,
    pub w_2: usize,
    pub b_2: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) blocks: Vec<BlockOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut next = 0usize;
        let mut add = |name: String, shape: Vec<usize>| -> usize {
            let offset = next;
            next += shape.iter().product::<usize>();
            tensors.push(TensorInfo { name, shape, offset });
            offset
        };
        let d = c.d_model;
        let tok_emb = add("tok_emb".into(), vec![c.vocab_size, d]);
        let pos_emb = add("pos_emb".into(), vec![c.max_seq_len, d]);
        let mut blocks = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            blocks.push(BlockOffsets {
                ln1_g: add(p("ln1.g"), vec![d]),
                ln1_b: add(p("ln1.b"), vec![d]),
                w_q: add(p("attn.w_q"), vec![d, d]),
                b_q: add(p("attn.b_q"), vec![d]),
                w_k: add(p("attn.w_k"), vec![d, d]),
                b_k: add(p("attn.b_k"), vec![d]),
                w_v: add(p("attn.w_v"), vec![d, d]),
                b_v: add(p("attn.b_v"), vec![d]),
                w_o: add(p("attn.w_o"), vec![d, d]),
                b_o: add(p("attn.b_o"), vec![d]),
                ln2_g: add(p("ln2.g"), vec![d]),
                ln2_b: add(p("ln2.b"), vec![d]),
                w_1: add(p("ff.w_1"), vec![d, c.d_ff]),
                b_1: add(p("ff.b_1"), vec![c.d_ff]),
                w_2: add(p("ff.w_2"), vec![c.d_ff, d]),
                b_2: add(p("ff.b_2"), vec![d]),
            });
        }
        let lnf_g = add("lnf.g".into(), vec![d]);
        let lnf_b = add("lnf.b".into(), vec![d]);
        Self {
            tensors,
            total: next,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// The tensor that owns flat index `i`.
    pub fn owner(&self, i: usize) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.range().contains(&i))
    }

    fn is_norm_gain(name: &str) -> bool {
        name.ends_with(".g")
    }
}

/// Model weights `θ`.
#[derive(Debug, Clone)]
pub struct Parameters {
    pub config: ModelConfig,
    pub data: Vec<f64>,
    layout: std::sync::Arc<Layout>,
}

impl PartialEq for Parameters {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

/// Gradient with the same layout as [`Parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub data: Vec<f64>,
}

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Self { data: vec![0.0; n] }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Parameters {
    /// Gaussian init with standard deviation `init_scale`; norm gains start at 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0.0; layout.total];
        let mut r = rng::rng(rng::mix(seed, 0x1417));
        for t in &layout.tensors {
            let is_bias = t.shape.len() == 1;
            for v in &mut data[t.range()] {
                *v = if Layout::is_norm_gain(&t.name) {
                    1.0
                } else if is_bias {
                    0.0
                } else {
                    let z: f64 = StandardNormal.sample(&mut r);
                    z * config.init_scale
                };
            }
        }
        let mut p = Self {
            config,
            data,
            layout: std::sync::Arc::new(layout),
        };
        p.round_to_precision();
        Ok(p)
    }

    pub fn from_data(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                layout.total,
                data.len()
            )));
        }
        Ok(Self {
            config,
            data,
            layout: std::sync::Arc::new(layout),
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients::zeros(self.data.len())
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.tensor(name).map(|t| &self.data[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.tensor(name)?.range();
        Some(&mut self.data[r])
    }

    /// First tensor holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        first_non_finite(&self.layout, &self.data)
    }

    /// Rounds stored weights to single precision when configured for it.
    pub fn round_to_precision(&mut self) {
        if self.config.precision == Precision::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub(crate) fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        for (position, &t) in tokens.iter().enumerate() {
            if t as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfVocab {
                    token: t,
                    position,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Log-likelihood of `target` given `prompt`. `target` must end in EOS.
    pub fn sequence_logprob(&self, prompt: &[Token], target: &[Token]) -> Result<SeqLogProb> {
        if target.last() != Some(&EOS) {
            return Err(Error::Precondition("target must be non-empty and end with EOS".into()));
        }
        self.target_logprob(prompt, target)
    }

    /// Like [`Parameters::sequence_logprob`] but accepts targets truncated
    /// before EOS.
    pub fn target_logprob(&self, prompt: &[Token], target: &[Token]) -> Result<SeqLogProb> {
        let cache = self.forward_target(prompt, target)?;
        Ok(cache.target_score(prompt.len(), target))
    }

    /// Forward pass over `prompt ++ target[..n-1]`, the input whose rows
    /// predict each target token.
    pub fn forward_target(&self, prompt: &[Token], target: &[Token]) -> Result<ForwardCache> {
        if target.is_empty() {
            return Err(Error::Precondition("empty target".into()));
        }
        if prompt.is_empty() {
            return Err(Error::Precondition("empty prompt".into()));
        }
        let mut input = Vec::with_capacity(prompt.len() + target.len() - 1);
        input.extend_from_slice(prompt);
        input.extend_from_slice(&target[..target.len() - 1]);
        self.forward_cached(&input)
    }
}

pub(crate) fn first_non_finite<'a>(layout: &'a Layout, data: &[f64]) -> Option<&'a str> {
    layout
        .tensors
        .iter()
        .find(|t| data[t.range()].iter().any(|v| !v.is_finite()))
        .map(|t| t.name.as_str())
}

/// Sum and token-mean log-likelihood of a target segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeqLogProb {
    pub sum: f64,
    pub avg: f64,
    pub n_tokens: usize,
}

/// `log softmax(row)[i]` for every entry, computed stably.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
