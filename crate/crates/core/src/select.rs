//! Test-time selection over candidate pools: Best-of-N reranking, MBR, and
//! cross-metric evaluation tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Pair, Token};
use crate::decode::Hypothesis;
use crate::error::{Error, Result};
use crate::quality::{ref_based_f, MetricId};

/// Candidates for one source in sampling order, with per-metric scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub source_id: String,
    pub candidates: Vec<Hypothesis>,
    /// Metric id -> one score per candidate.
    pub scores: BTreeMap<String, Vec<f64>>,
}

impl CandidatePool {
    pub fn new(source_id: impl Into<String>, candidates: Vec<Hypothesis>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Precondition("candidate pool is empty".into()));
        }
        Ok(Self {
            source_id: source_id.into(),
            candidates,
            scores: BTreeMap::new(),
        })
    }

    /// Pool scored with every metric in `metrics`.
    pub fn scored(pair: &Pair, candidates: Vec<Hypothesis>, metrics: &[MetricId]) -> Result<Self> {
        let mut pool = Self::new(pair.id.clone(), candidates)?;
        for &m in metrics {
            pool.add_metric(m, pair);
        }
        Ok(pool)
    }

    pub fn add_metric(&mut self, metric: MetricId, pair: &Pair) {
        let values = self.candidates.iter().map(|h| metric.score(h.output(), pair)).collect();
        self.scores.insert(metric.as_str().to_string(), values);
    }

    pub fn set_scores(&mut self, metric_id: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.candidates.len() {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: self.candidates.len(),
            });
        }
        self.scores.insert(metric_id.to_string(), values);
        Ok(())
    }

    pub fn metric(&self, metric_id: &str) -> Result<&[f64]> {
        self.scores
            .get(metric_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Missing(format!("pool {} has no '{metric_id}' scores", self.source_id)))
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Index of the first maximum among `scores[..n]`.
pub fn prefix_argmax(scores: &[f64], n: usize) -> Result<usize> {
    if n == 0 || n > scores.len() {
        return Err(Error::OutOfRange(format!("n = {n} outside 1..={}", scores.len())));
    }
    let mut best = 0;
    for (i, &v) in scores[..n].iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Best of the first `n` candidates under `rerank_metric`; ties go to the
/// lowest index.
pub fn best_of_n<'a>(pool: &'a CandidatePool, n: usize, rerank_metric: &str) -> Result<&'a Hypothesis> {
    let i = prefix_argmax(pool.metric(rerank_metric)?, n)?;
    Ok(&pool.candidates[i])
}

/// Expected utility of each candidate against the whole pool (itself
/// included) as pseudo-references.
pub fn expected_utilities<F>(candidates: &[&[Token]], utility: F) -> Vec<f64>
where
    F: Fn(&[Token], &[Token]) -> f64,
{
    let n = candidates.len() as f64;
    candidates
        .iter()
        .map(|c| candidates.iter().map(|r| utility(c, r)).sum::<f64>() / n)
        .collect()
}

/// MBR selection with a caller-supplied utility `(candidate, pseudo_ref)`.
/// Ties go to the lowest index.
pub fn mbr_with<F>(pool: &CandidatePool, utility: F) -> (usize, &Hypothesis)
where
    F: Fn(&[Token], &[Token]) -> f64,
{
    let outs: Vec<&[Token]> = pool.candidates.iter().map(|h| h.output()).collect();
    let eu = expected_utilities(&outs, utility);
    let i = prefix_argmax(&eu, eu.len()).expect("pool is non-empty");
    (i, &pool.candidates[i])
}

/// MBR with `ref_based_f` as the pairwise utility.
pub fn mbr(pool: &CandidatePool) -> &Hypothesis {
    mbr_with(pool, ref_based_f).1
}

/// Mean score of `metric` over BoN selections for each `n`, one pool per
/// pair (aligned by position).
pub fn bon_curve(
    pools: &[CandidatePool],
    pairs: &[Pair],
    ns: &[usize],
    rerank: MetricId,
    eval: MetricId,
) -> Result<Vec<(usize, f64)>> {
    check_aligned(pools, pairs)?;
    ns.iter()
        .map(|&n| {
            let total = pools
                .iter()
                .zip(pairs)
                .map(|(pool, pair)| Ok(eval.score(best_of_n(pool, n, rerank.as_str())?.output(), pair)))
                .sum::<Result<f64>>()?;
            Ok((n, total / pools.len() as f64))
        })
        .collect()
}

fn check_aligned(pools: &[CandidatePool], pairs: &[Pair]) -> Result<()> {
    if pools.len() != pairs.len() {
        return Err(Error::LengthMismatch {
            left: pools.len(),
            right: pairs.len(),
        });
    }
    if pools.is_empty() {
        return Err(Error::Precondition("no pools".into()));
    }
    for (pool, pair) in pools.iter().zip(pairs) {
        if pool.source_id != pair.id {
            return Err(Error::Precondition(format!(
                "pool {} is not aligned with pair {}",
                pool.source_id, pair.id
            )));
        }
    }
    Ok(())
}

/// Mean of `metric` over system outputs for every test pair. Outputs are
/// keyed by source id.
pub fn evaluate_outputs(outputs: &BTreeMap<String, Hypothesis>, test: &[Pair], metric: MetricId) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Precondition("empty test split".into()));
    }
    let mut total = 0.0;
    for pair in test {
        let h = outputs
            .get(&pair.id)
            .ok_or_else(|| Error::Missing(format!("no output for {}", pair.id)))?;
        total += metric.score(h.output(), pair);
    }
    Ok(total / test.len() as f64)
}

/// One cell of a cross-metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub train_metric: String,
    pub eval_metric: String,
    pub value: f64,
}

/// Evaluates each system (keyed by its training metric) under every
/// evaluation metric. Cells are returned row-major in key order.
pub fn cross_metric_eval(
    systems: &BTreeMap<String, BTreeMap<String, Hypothesis>>,
    test: &[Pair],
    eval_metrics: &[MetricId],
) -> Result<Vec<GridCell>> {
    let mut cells = Vec::new();
    for (train_metric, outputs) in systems {
        for &m in eval_metrics {
            cells.push(GridCell {
                train_metric: train_metric.clone(),
                eval_metric: m.as_str().to_string(),
                value: evaluate_outputs(outputs, test, m)?,
            });
        }
    }
    Ok(cells)
}

/// Formats a float the same way everywhere a report is written.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.6}")
}

/// `system\tn\tmean_score` rows.
pub fn curve_tsv(rows: &[(String, usize, f64)]) -> String {
    let mut out = String::from("system\tn\tmean_score\n");
    for (system, n, v) in rows {
        let _ = writeln!(out, "{system}\t{n}\t{}", fmt_num(*v));
    }
    out
}

/// `train_metric\teval_metric\tvalue` rows.
pub fn grid_tsv(cells: &[GridCell]) -> String {
    let mut out = String::from("train_metric\teval_metric\tvalue\n");
    for c in cells {
        let _ = writeln!(out, "{}\t{}\t{}", c.train_metric, c.eval_metric, fmt_num(c.value));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyp(tokens: &[Token]) -> Hypothesis {
        let mut t = tokens.to_vec();
        t.push(crate::corpus::EOS);
        Hypothesis {
            source_id: "s".into(),
            tokens: t,
            sum_logprob: -1.0,
            avg_logprob: -0.5,
            truncated: false,
        }
    }

    #[test]
    fn bon_prefix_and_ties() {
        let s = [0.2, 0.9, 0.9, 0.1, 1.0];
        assert_eq!(prefix_argmax(&s, 1).unwrap(), 0);
        assert_eq!(prefix_argmax(&s, 3).unwrap(), 1);
        assert_eq!(prefix_argmax(&s, 5).unwrap(), 4);
        assert!(prefix_argmax(&s, 0).is_err());
        assert!(prefix_argmax(&s, 6).is_err());
    }

    #[test]
    fn mbr_prefers_the_duplicated_hypothesis() {
        let pool = CandidatePool::new("s", vec![hyp(&[30, 31, 32]), hyp(&[20, 21, 22]), hyp(&[20, 21, 22])]).unwrap();
        let (i, _) = mbr_with(&pool, ref_based_f);
        assert_eq!(i, 1);
    }

    #[test]
    fn singleton_mbr() {
        let pool = CandidatePool::new("s", vec![hyp(&[25])]).unwrap();
        assert_eq!(mbr(&pool).output(), &[25]);
        assert!(CandidatePool::new("s", vec![]).is_err());
    }

    #[test]
    fn tsv_headers() {
        assert!(curve_tsv(&[("base".into(), 1, 0.5)]).starts_with("system\tn\tmean_score\nbase\t1\t0.500000\n"));
        assert!(grid_tsv(&[]).starts_with("train_metric\teval_metric\tvalue\n"));
    }
}
