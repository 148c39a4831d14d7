//! Programmable quality oracles `q(y|x)` in `[0, 1]`.
//!
//! * `ref_based_f`: mean of unigram and bigram multiset F1 against the
//!   reference. Penalizes synonym alternates.
//! * `ref_free_rule`: per-position membership in the acceptable target sets,
//!   scaled by a length ratio. Accepts synonyms.
//! * a noisy wrapper adding clamped Gaussian noise to either of them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Pair, Token};
use crate::decode::Hypothesis;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    RefBasedF,
    RefFreeRule,
}

impl MetricId {
    pub const ALL: [MetricId; 2] = [MetricId::RefBasedF, MetricId::RefFreeRule];

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricId::RefBasedF => "ref_based_f",
            MetricId::RefFreeRule => "ref_free_rule",
        }
    }

    pub fn score(&self, hyp: &[Token], pair: &Pair) -> f64 {
        match self {
            MetricId::RefBasedF => ref_based_f(hyp, &pair.reference),
            MetricId::RefFreeRule => ref_free_rule(hyp, pair),
        }
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ref_based_f" | "ref_based_F" => Ok(MetricId::RefBasedF),
            "ref_free_rule" => Ok(MetricId::RefFreeRule),
            other => Err(Error::InvalidConfig(format!("unknown metric '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub value: f64,
    pub metric_id: String,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleConfig {
    RefBasedF,
    RefFreeRule,
    NoisyWrapper {
        base: MetricId,
        noise_sigma: f64,
        seed: u64,
    },
}

impl OracleConfig {
    pub fn plain(metric: MetricId) -> Self {
        match metric {
            MetricId::RefBasedF => OracleConfig::RefBasedF,
            MetricId::RefFreeRule => OracleConfig::RefFreeRule,
        }
    }

    pub fn base_metric(&self) -> MetricId {
        match self {
            OracleConfig::RefBasedF => MetricId::RefBasedF,
            OracleConfig::RefFreeRule => MetricId::RefFreeRule,
            OracleConfig::NoisyWrapper { base, .. } => *base,
        }
    }

    pub fn metric_id(&self) -> String {
        match self {
            OracleConfig::NoisyWrapper { base, noise_sigma, .. } => format!("noisy({base},{noise_sigma})"),
            other => other.base_metric().to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let OracleConfig::NoisyWrapper { noise_sigma, .. } = self {
            if !(*noise_sigma >= 0.0 && noise_sigma.is_finite()) {
                return Err(Error::InvalidConfig("noise_sigma must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

fn counts<K: Ord>(items: impl Iterator<Item = K>) -> BTreeMap<K, usize> {
    let mut m = BTreeMap::new();
    for k in items {
        *m.entry(k).or_insert(0) += 1;
    }
    m
}

fn multiset_f1<K: Ord>(hyp: &BTreeMap<K, usize>, reference: &BTreeMap<K, usize>) -> Option<f64> {
    let nh: usize = hyp.values().sum();
    let nr: usize = reference.values().sum();
    if nh == 0 && nr == 0 {
        return None;
    }
    if nh == 0 || nr == 0 {
        return Some(0.0);
    }
    let overlap: usize = hyp
        .iter()
        .map(|(k, c)| (*c).min(reference.get(k).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return Some(0.0);
    }
    let p = overlap as f64 / nh as f64;
    let r = overlap as f64 / nr as f64;
    Some(2.0 * p * r / (p + r))
}

/// Mean of unigram and bigram multiset F1. When neither side has a bigram
/// (both of length one) only the unigram F1 counts.
pub fn ref_based_f(hyp: &[Token], reference: &[Token]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let uni = multiset_f1(&counts(hyp.iter().copied()), &counts(reference.iter().copied())).unwrap_or(0.0);
    let bi = multiset_f1(&counts(hyp.windows(2)), &counts(reference.windows(2)));
    match bi {
        Some(b) => 0.5 * (uni + b),
        None => uni,
    }
}

/// `(#positions j < min(|h|,|s|) with h[j] acceptable) / max(|h|, |s|)`.
pub fn ref_free_rule(hyp: &[Token], pair: &Pair) -> f64 {
    let n = pair.source.len();
    if hyp.is_empty() || n == 0 {
        return 0.0;
    }
    let m = hyp.len().min(n);
    let hits = (0..m).filter(|&j| pair.valid_target_sets[j].contains(&hyp[j])).count();
    hits as f64 / hyp.len().max(n) as f64
}

/// Scores each hypothesis of a group, preserving order.
pub fn score_group(group: &[Hypothesis], pair: &Pair, oracle: &OracleConfig) -> Result<Vec<QualityScore>> {
    if group.is_empty() {
        return Err(Error::Precondition("cannot score an empty group".into()));
    }
    oracle.validate()?;
    let metric_id = oracle.metric_id();
    Ok(group
        .iter()
        .map(|h| QualityScore {
            value: score_one(h.output(), pair, oracle),
            metric_id: metric_id.clone(),
            source_id: pair.id.clone(),
        })
        .collect())
}

/// Score of one hypothesis. The noise draw depends on `(seed, pair id,
/// hypothesis tokens)`, so the wrapper is a deterministic function of its
/// input and scoring is permutation-equivariant.
pub fn score_one(hyp: &[Token], pair: &Pair, oracle: &OracleConfig) -> f64 {
    let base = oracle.base_metric().score(hyp, pair);
    match oracle {
        OracleConfig::NoisyWrapper { noise_sigma, seed, .. } if *noise_sigma > 0.0 => {
            let key = format!("{}|{:?}", pair.id, hyp);
            let mut r = rng::rng(rng::mix_str(*seed, &key));
            let eps = Normal::new(0.0, *noise_sigma).expect("validated sigma").sample(&mut r);
            (base + eps).clamp(0.0, 1.0)
        }
        _ => base,
    }
}

/// Convenience: raw score values of a group.
pub fn score_values(group: &[Hypothesis], pair: &Pair, oracle: &OracleConfig) -> Result<Vec<f64>> {
    Ok(score_group(group, pair, oracle)?.into_iter().map(|s| s.value).collect())
}

/// One row of a persisted scored pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    pub source_id: String,
    pub hyp_index: usize,
    pub metric_id: String,
    pub value: f64,
}
