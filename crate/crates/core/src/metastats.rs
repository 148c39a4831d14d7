//! Correlation statistics for meta-evaluation and likelihood-as-QE.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{render_prompt, Pair};
use crate::decode::Hypothesis;
use crate::error::{Error, Result};
use crate::model::Parameters;
use crate::quality::MetricId;

/// Standard deviations below this are treated as zero.
pub const DEGENERATE_EPS: f64 = 1e-12;

fn check_columns(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::Precondition("need at least two observations".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Precondition("non-finite observation".into()));
    }
    Ok(())
}

/// Population mean and standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Pearson correlation with population estimators:
/// `(1/n) sum ((a_i - mu_a)/sigma_a) ((b_i - mu_b)/sigma_b)`.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_columns(a, b)?;
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    if sa < DEGENERATE_EPS || sb < DEGENERATE_EPS {
        return Err(Error::Degenerate("zero-variance column".into()));
    }
    let n = a.len() as f64;
    let r = a
        .iter()
        .zip(b)
        .map(|(x, y)| ((x - ma) / sa) * ((y - mb) / sb))
        .sum::<f64>()
        / n;
    Ok(r.clamp(-1.0, 1.0))
}

/// Ranks starting at 1; tied values share the mean of their rank range.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation of the average ranks. Doubled ranks are integers,
/// so the moment sums are exact and only the final ratio is rounded.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_columns(a, b)?;
    let doubled = |x: &[f64]| -> Vec<i128> { average_ranks(x).into_iter().map(|r| (2.0 * r) as i128).collect() };
    let (ra, rb) = (doubled(a), doubled(b));
    let n = ra.len() as i128;
    let (sa, sb) = (ra.iter().sum::<i128>(), rb.iter().sum::<i128>());
    let saa: i128 = ra.iter().map(|r| r * r).sum();
    let sbb: i128 = rb.iter().map(|r| r * r).sum();
    let sab: i128 = ra.iter().zip(&rb).map(|(x, y)| x * y).sum();
    let (da, db) = (n * saa - sa * sa, n * sbb - sb * sb);
    if da == 0 || db == 0 {
        return Err(Error::Degenerate("zero-variance column".into()));
    }
    Ok(rank_ratio(n * sab - sa * sb, da, db))
}

/// `num / sqrt(da db)` for exact integer moments, clamped to [-1, 1].
pub fn rank_ratio(num: i128, da: i128, db: i128) -> f64 {
    (num as f64 / ((da as f64) * (db as f64)).sqrt()).clamp(-1.0, 1.0)
}

fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort by value, returning the number of strict inversions.
fn count_inversions(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = count_inversions(&mut v[..mid], buf) + count_inversions(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Tie counts `(pairs tied in a, pairs tied in b)`.
pub fn tie_counts(a: &[f64], b: &[f64]) -> (u64, u64) {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap_or(Ordering::Equal));
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap_or(Ordering::Equal));
    (tied_pairs(&sa), tied_pairs(&sb))
}

/// Kendall's tau-b, `O(n log n)` (Knight's algorithm).
pub fn kendall_tau_b(a: &[f64], b: &[f64]) -> Result<f64> {
    check_columns(a, b)?;
    let n = a.len() as u64;
    let n0 = n * (n - 1) / 2;
    let mut pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    pairs.sort_by(|x, y| {
        x.0.partial_cmp(&y.0)
            .unwrap_or(Ordering::Equal)
            .then(x.1.partial_cmp(&y.1).unwrap_or(Ordering::Equal))
    });
    let firsts: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let n1 = tied_pairs(&firsts);
    let n3 = tied_pairs(&pairs);
    let mut seconds: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let discordant = count_inversions(&mut seconds, &mut Vec::with_capacity(a.len()));
    let n2 = tied_pairs(&seconds);
    if n1 == n0 || n2 == n0 {
        return Err(Error::Degenerate("all pairs tied in one column".into()));
    }
    let numerator = n0 as f64 - n1 as f64 - n2 as f64 + n3 as f64 - 2.0 * discordant as f64;
    let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    Ok((numerator / denom).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson: f64,
    pub spearman: f64,
    pub kendall_tau_b: f64,
    pub n: usize,
    /// Tied pairs within column a and within column b.
    pub tie_counts: (u64, u64),
    pub column_a: String,
    pub column_b: String,
}

pub fn correlation_report(a: &[f64], b: &[f64], column_a: &str, column_b: &str) -> Result<CorrelationReport> {
    Ok(CorrelationReport {
        pearson: pearson(a, b)?,
        spearman: spearman(a, b)?,
        kendall_tau_b: kendall_tau_b(a, b)?,
        n: a.len(),
        tie_counts: tie_counts(a, b),
        column_a: column_a.to_string(),
        column_b: column_b.to_string(),
    })
}

/// Likelihood as a quality estimate: column a is each hypothesis's
/// token-mean log-likelihood under `params`, column b the gold metric.
pub fn qe_eval(params: &Parameters, items: &[(&Pair, &Hypothesis)], gold: MetricId) -> Result<CorrelationReport> {
    let (a, b) = qe_columns(params, items, gold)?;
    correlation_report(&a, &b, "avg_logprob", gold.as_str())
}

pub fn qe_columns(params: &Parameters, items: &[(&Pair, &Hypothesis)], gold: MetricId) -> Result<(Vec<f64>, Vec<f64>)> {
    let a = items
        .par_iter()
        .map(|(pair, hyp)| {
            let prompt = render_prompt(pair)?;
            Ok(params.target_logprob(&prompt, &hyp.tokens)?.avg)
        })
        .collect::<Result<Vec<f64>>>()?;
    let b = items.iter().map(|(pair, hyp)| gold.score(hyp.output(), pair)).collect();
    Ok((a, b))
}
