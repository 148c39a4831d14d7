//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use calib_core::corpus::Token;
use calib_core::harness::{DataConfig, SuiteConfig};
use calib_core::losses::Objective;
use calib_core::model::{ModelConfig, Parameters};
use calib_core::train::TrainConfig;

/// Average ranks by direct counting: rank = #smaller + (#equal + 1) / 2,
/// returned doubled so every value is an integer.
pub fn doubled_ranks(x: &[f64]) -> Vec<i128> {
    x.iter()
        .map(|v| {
            let less = x.iter().filter(|w| *w < v).count() as i128;
            let equal = x.iter().filter(|w| *w == v).count() as i128;
            2 * less + equal + 1
        })
        .collect()
}

/// Spearman from O(n^2) ranks and exact integer moments.
pub fn spearman_oracle(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ra, rb) = (doubled_ranks(a), doubled_ranks(b));
    let n = a.len() as i128;
    let mut sums = [0i128; 5];
    for (x, y) in ra.iter().zip(&rb) {
        sums[0] += x;
        sums[1] += y;
        sums[2] += x * x;
        sums[3] += y * y;
        sums[4] += x * y;
    }
    let da = n * sums[2] - sums[0] * sums[0];
    let db = n * sums[3] - sums[1] * sums[1];
    if da == 0 || db == 0 {
        return None;
    }
    let num = n * sums[4] - sums[0] * sums[1];
    Some((num as f64 / ((da as f64) * (db as f64)).sqrt()).clamp(-1.0, 1.0))
}

/// Kendall tau-b by enumerating every pair.
pub fn kendall_oracle(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    let (mut conc, mut disc, mut tie_a, mut tie_b) = (0i64, 0i64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            if da == 0.0 {
                tie_a += 1;
            }
            if db == 0.0 {
                tie_b += 1;
            }
            if da * db > 0.0 {
                conc += 1;
            } else if da * db < 0.0 {
                disc += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as u64;
    if tie_a == n0 || tie_b == n0 {
        return None;
    }
    let denom = ((n0 - tie_a) as f64 * (n0 - tie_b) as f64).sqrt();
    Some(((conc - disc) as f64 / denom).clamp(-1.0, 1.0))
}

/// Textbook sample-covariance Pearson.
pub fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Relative error with a floor that keeps tiny gradients from dominating.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn tiny_model(vocab: usize, d: usize, layers: usize, max_seq: usize, seed: u64) -> Parameters {
    let cfg = ModelConfig {
        vocab_size: vocab,
        d_model: d,
        n_layers: layers,
        n_heads: 2,
        d_ff: 2 * d,
        max_seq_len: max_seq,
        init_scale: 0.5,
        ..ModelConfig::default()
    };
    Parameters::init(cfg, seed).unwrap()
}

/// Every token sequence of exactly `len` tokens over `0..vocab`.
pub fn all_sequences(vocab: usize, len: usize) -> Vec<Vec<Token>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|s| {
                (0..vocab as Token).map(move |t| {
                    let mut s = s.clone();
                    s.push(t);
                    s
                })
            })
            .collect();
    }
    out
}

/// A pinned threshold from the repository's `expected-results.json`.
pub fn expected(key: &str) -> f64 {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../expected-results.json");
    let text = std::fs::read_to_string(&path).expect("expected-results.json is readable");
    let v: serde_json::Value = serde_json::from_str(&text).expect("expected-results.json parses");
    v["thresholds"][key]["value"]
        .as_f64()
        .unwrap_or_else(|| panic!("missing threshold {key}"))
}

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_calib-seq"));
    c.env_remove("CALIB_SEQ_OUT");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

pub fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        ..ModelConfig::default()
    }
}

pub fn small_data() -> DataConfig {
    DataConfig {
        n_train: 64,
        n_valid: 8,
        n_test: 6,
        ..DataConfig::default()
    }
}

pub fn small_suite() -> SuiteConfig {
    let d = SuiteConfig::default();
    SuiteConfig {
        data: small_data(),
        pretrain: TrainConfig {
            model: small_model(),
            epochs: 1,
            ..d.pretrain.clone()
        },
        finetune: TrainConfig {
            k: 4,
            n_sources: 8,
            batch_size: 4,
            grad_accum: 1,
            epochs: 1,
            ..d.finetune.clone()
        },
        learning_rates: vec![3e-4],
        ks: vec![2, 4],
        ..d
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, v: &T) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

/// Relative path to bytes of every file under `root`.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

/// Runs every subcommand once under `root` with `--threads 1`.
pub fn pipeline(root: &Path, cfg_dir: &Path) {
    let data_cfg = cfg_dir.join("data.json");
    let pre_cfg = cfg_dir.join("pretrain.json");
    let train_cfg = cfg_dir.join("train.json");
    let suite = small_suite();
    write_json(&data_cfg, &suite.data);
    write_json(&pre_cfg, &suite.pretrain);
    write_json(
        &train_cfg,
        &TrainConfig {
            objective: Objective::Calibration,
            ..suite.finetune.clone()
        },
    );
    let t = ["--threads", "1", "--seed", "5"];
    let data = root.join("data");
    let base = root.join("base");
    let a = |extra: &[&str]| -> Vec<String> { extra.iter().chain(t.iter()).map(|s| s.to_string()).collect() };
    let go = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs)
    };
    go(a(&["gen-data", "--config", p(&data_cfg), "--out", p(root)]));
    go(a(&[
        "pretrain",
        "--config",
        p(&pre_cfg),
        "--data",
        p(&data),
        "--out",
        p(root),
    ]));
    go(a(&[
        "sample",
        "--checkpoint",
        p(&base),
        "--data",
        p(&data),
        "--out",
        p(&root.join("s")),
    ]));
    let pool = root.join("s/pool.jsonl");
    go(a(&[
        "score",
        "--pool",
        p(&pool),
        "--data",
        p(&data),
        "--out",
        p(&root.join("s")),
    ]));
    go(a(&[
        "meta-eval",
        "--input",
        p(&root.join("s/scores.jsonl")),
        "--out",
        p(&root.join("s")),
    ]));
    go(a(&[
        "select",
        "--pool",
        p(&pool),
        "--data",
        p(&data),
        "--n",
        "4",
        "--out",
        p(&root.join("bon")),
    ]));
    go(a(&[
        "select",
        "--pool",
        p(&pool),
        "--data",
        p(&data),
        "--strategy",
        "mbr",
        "--out",
        p(&root.join("mbr")),
    ]));
    let run_dir = go(a(&[
        "train",
        "--config",
        p(&train_cfg),
        "--data",
        p(&data),
        "--base",
        p(&base),
        "--out",
        p(root),
    ]));
    let run_dir = PathBuf::from(run_dir.trim());
    go(a(&[
        "decode",
        "--checkpoint",
        p(&run_dir),
        "--data",
        p(&data),
        "--out",
        p(&root.join("d")),
    ]));
    let suite_cfg = cfg_dir.join("suite.json");
    write_json(&suite_cfg, &suite);
    let all = "main_table,qe_scatter,beam_vs_bon,k_sensitivity,cross_metric_grid";
    go(a(&[
        "experiment",
        "--name",
        all,
        "--config",
        p(&suite_cfg),
        "--out",
        p(&root.join("exp")),
    ]));
}
