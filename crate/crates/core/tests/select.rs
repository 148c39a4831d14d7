use std::collections::BTreeMap;

use calib_core::corpus::{Pair, TaskSpec, Token, EOS};
use calib_core::decode::Hypothesis;
use calib_core::quality::{ref_based_f, MetricId};
use calib_core::select::*;
use proptest::prelude::*;

fn hyp(id: &str, tokens: &[Token]) -> Hypothesis {
    let mut t = tokens.to_vec();
    t.push(EOS);
    Hypothesis {
        source_id: id.into(),
        tokens: t,
        sum_logprob: -1.0,
        avg_logprob: -0.5,
        truncated: false,
    }
}

fn task() -> TaskSpec {
    TaskSpec {
        source_vocab_size: 3,
        target_vocab_size: 5,
        substitution_map: vec![7, 8, 9],
        synonym_set: BTreeMap::from([(5, 10)]),
        min_len: 1,
        max_len: 6,
        seed: 0,
    }
}

fn pool_with(scores: &[f64]) -> CandidatePool {
    let cands = (0..scores.len()).map(|i| hyp("s", &[7 + i as Token])).collect();
    let mut p = CandidatePool::new("s", cands).unwrap();
    p.set_scores("m", scores.to_vec()).unwrap();
    p
}

#[test]
fn n_one_returns_the_first_candidate() {
    let p = pool_with(&[0.1, 0.9, 0.5]);
    assert_eq!(best_of_n(&p, 1, "m").unwrap(), &p.candidates[0]);
    assert!(best_of_n(&p, 4, "m").is_err());
    assert!(best_of_n(&p, 2, "missing").is_err());
}

#[test]
fn duplicated_hypothesis_wins_mbr() {
    let outlier = hyp("s", &[11, 11, 11]);
    let dup = hyp("s", &[7, 8, 9]);
    let near = hyp("s", &[7, 8, 10]);
    let pool = CandidatePool::new("s", vec![outlier, near, dup.clone(), dup.clone()]).unwrap();
    assert_eq!(mbr(&pool), &dup);
}

#[test]
fn own_metric_grid_cell_equals_plain_evaluation() {
    let t = task();
    let test: Vec<Pair> = [vec![4u32, 5], vec![6, 4, 4], vec![5]]
        .into_iter()
        .enumerate()
        .map(|(i, s)| t.make_pair(format!("t{i}"), s))
        .collect();
    // hand-made outputs: exact, one synonym, one wrong token
    let outs: BTreeMap<String, Hypothesis> = [
        (test[0].id.clone(), hyp("t0", &test[0].reference)),
        (test[1].id.clone(), hyp("t1", &[7, 8, 9])),
        (test[2].id.clone(), hyp("t2", &[10])),
    ]
    .into_iter()
    .collect();
    // references [8,7], [7,7,9], [8]
    // ref_free_rule: 1, 2/3, 1; ref_based_f: 1, (2/3 + 0)/2, 0
    let expect_rule = (1.0 + 2.0 / 3.0 + 1.0) / 3.0;
    let expect_f = (1.0 + (2.0 / 3.0) / 2.0) / 3.0;
    assert!((evaluate_outputs(&outs, &test, MetricId::RefFreeRule).unwrap() - expect_rule).abs() < 1e-15);
    assert!((evaluate_outputs(&outs, &test, MetricId::RefBasedF).unwrap() - expect_f).abs() < 1e-15);

    let mut systems = BTreeMap::new();
    systems.insert("ref_free_rule".to_string(), outs.clone());
    systems.insert("ref_based_f".to_string(), outs.clone());
    let grid = cross_metric_eval(&systems, &test, &MetricId::ALL).unwrap();
    assert_eq!(grid.len(), 4);
    for c in &grid {
        let m = MetricId::ALL.into_iter().find(|m| m.as_str() == c.eval_metric).unwrap();
        assert_eq!(c.value, evaluate_outputs(&outs, &test, m).unwrap());
    }
    // identical outputs give identical columns across rows
    assert_eq!(grid[0].value, grid[2].value);
    assert_eq!(grid[1].value, grid[3].value);
    let tsv = grid_tsv(&grid);
    assert_eq!(tsv.lines().count(), 5);

    let mut missing = outs.clone();
    missing.remove("t2");
    assert!(evaluate_outputs(&missing, &test, MetricId::RefBasedF).is_err());
}

#[test]
fn bon_curve_is_aligned_and_monotone_in_rerank_metric() {
    let t = task();
    let test: Vec<Pair> = (0..4).map(|i| t.make_pair(format!("t{i}"), vec![4, 5, 6])).collect();
    let pools: Vec<CandidatePool> = test
        .iter()
        .map(|p| {
            let c = vec![
                hyp(&p.id, &[7]),
                hyp(&p.id, &[9, 8]),
                hyp(&p.id, &p.reference),
                hyp(&p.id, &[9, 10, 7]),
            ];
            CandidatePool::scored(p, c, &MetricId::ALL).unwrap()
        })
        .collect();
    let curve = bon_curve(&pools, &test, &[1, 2, 3, 4], MetricId::RefBasedF, MetricId::RefBasedF).unwrap();
    assert!(curve.windows(2).all(|w| w[1].1 >= w[0].1));
    assert_eq!(curve[3].1, 1.0);
    assert!(bon_curve(&pools[..3], &test, &[1], MetricId::RefBasedF, MetricId::RefBasedF).is_err());
}

fn pool_strategy() -> impl Strategy<Value = Vec<Vec<Token>>> {
    prop::collection::vec(prop::collection::vec(7u32..11, 1..5), 1..=8)
}

proptest! {
    #[test]
    fn bon_matches_prefix_max_oracle(scores in prop::collection::vec(0.0f64..1.0, 8)) {
        let p = pool_with(&scores);
        let mut prev = f64::NEG_INFINITY;
        for n in 1..=8 {
            // oracle: first index attaining the prefix maximum
            let m = scores[..n].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let i = scores.iter().position(|&s| s == m).unwrap();
            let got = best_of_n(&p, n, "m").unwrap();
            prop_assert_eq!(got, &p.candidates[i]);
            prop_assert!(m >= prev);
            prev = m;
        }
    }

    #[test]
    fn mbr_matches_double_loop_oracle(outs in pool_strategy()) {
        let pool = CandidatePool::new("s", outs.iter().map(|o| hyp("s", o)).collect()).unwrap();
        let n = outs.len();
        let mut best = 0;
        let mut best_u = f64::NEG_INFINITY;
        for i in 0..n {
            let mut u = 0.0;
            for j in 0..n {
                u += ref_based_f(&outs[i], &outs[j]);
            }
            u /= n as f64;
            if u > best_u {
                best_u = u;
                best = i;
            }
        }
        let (idx, h) = mbr_with(&pool, ref_based_f);
        prop_assert_eq!(idx, best);
        prop_assert_eq!(h, &pool.candidates[best]);
    }
}
