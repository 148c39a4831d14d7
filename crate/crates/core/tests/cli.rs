mod common;

use std::collections::BTreeMap;
use std::path::Path;

use calib_core::harness::Manifest;
use common::{ok, p, pipeline, run, small_suite, tree, write_json};

#[test]
fn usage_errors_exit_two() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(run(&["gen-data", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn validation_errors_exit_one_with_a_code_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"task": {"min_len": 9, "max_len": 3}}"#).unwrap();
    let o = run(&["gen-data", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    let line = err.lines().last().unwrap();
    let code = line.split(':').next().unwrap();
    assert!(
        code.starts_with("E_") && code.chars().all(|c| c.is_ascii_uppercase() || c == '_'),
        "{line}"
    );

    let o = run(&["experiment", "--name", "no_such", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("E_INVALID_CONFIG:"));
    let o = run(&[
        "decode",
        "--checkpoint",
        "/nonexistent",
        "--data",
        "/nonexistent",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn meta_eval_matches_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("scores.tsv");
    std::fs::write(&tsv, "lp\tq\n1\t2\n2\t1\n3\t3\n").unwrap();
    let out = ok(&["meta-eval", "--input", p(&tsv), "--out", p(dir.path())]);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    // centred columns (-1,0,1) and (0,-1,1): r = 1/2; no ties, so
    // Spearman equals Pearson; pairs: 2 concordant, 1 discordant
    assert!((v["pearson"].as_f64().unwrap() - 0.5).abs() < 1e-15);
    assert!((v["spearman"].as_f64().unwrap() - 0.5).abs() < 1e-15);
    assert!((v["kendall_tau_b"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(v["n"], 3);
    assert_eq!(v["column_a"], "lp");
    let saved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("meta_eval.json")).unwrap()).unwrap();
    assert_eq!(saved, v);
}

#[test]
fn subcommands_rerun_byte_identically() {
    let cfg = tempfile::tempdir().unwrap();
    let one = tempfile::tempdir().unwrap();
    let two = tempfile::tempdir().unwrap();
    pipeline(one.path(), cfg.path());
    pipeline(two.path(), cfg.path());
    let (a, b) = (tree(one.path()), tree(two.path()));
    for f in [
        "data/train.jsonl",
        "base/checkpoint.bin",
        "s/pool.jsonl",
        "s/scores.jsonl",
        "s/meta_eval.json",
        "d/outputs.jsonl",
    ] {
        assert!(a.contains_key(Path::new(f)), "missing {f}");
    }
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(v == &b[k], "{} differs between reruns", k.display());
    }
}

#[test]
fn experiment_reports_have_the_promised_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("suite.json");
    let suite = small_suite();
    write_json(&cfg, &suite);
    let out = dir.path().join("out");
    let names = "main_table,beam_vs_bon";
    let args = [
        "experiment",
        "--name",
        names,
        "--seeds",
        "3",
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--threads",
        "1",
    ];
    ok(&args);
    let report = out.join("main_table+beam_vs_bon");
    let main = std::fs::read_to_string(report.join("main_table.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = main.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 4);
    let systems: Vec<&str> = rows.iter().map(|r| r[1]).collect();
    assert_eq!(systems, ["base", "sft_bon", "cpo_like", "calibration"]);

    let curve = std::fs::read_to_string(report.join("beam_vs_bon.tsv")).unwrap();
    let header: Vec<&str> = curve.lines().next().unwrap().split('\t').collect();
    let (sys_col, n_col) = (
        header.iter().position(|h| *h == "system").unwrap(),
        header.iter().position(|h| *h == "n").unwrap(),
    );
    let mut per_system: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for l in curve.lines().skip(1) {
        let c: Vec<&str> = l.split('\t').collect();
        per_system
            .entry(c[sys_col].into())
            .or_default()
            .push(c[n_col].parse().unwrap());
    }
    assert!(!per_system.is_empty());
    for ns in per_system.values() {
        assert_eq!(ns, &[1, 2, 4, 8, 16, 32]);
    }

    // every numeric cell is in the manifest, and only those
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(report.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest.failures.is_empty());
    for file in ["main_table.tsv", "beam_vs_bon.tsv"] {
        let text = std::fs::read_to_string(report.join(file)).unwrap();
        let header: Vec<&str> = text.lines().next().unwrap().split('\t').collect();
        let mut cells = 0;
        for (i, l) in text.lines().skip(1).enumerate() {
            for (j, c) in l.split('\t').enumerate() {
                // seed and n are row keys, not reported numbers
                if ["seed", "n"].contains(&header[j]) || c.parse::<f64>().is_err() {
                    continue;
                }
                cells += 1;
                let e = manifest
                    .entries
                    .iter()
                    .find(|e| e.file == file && e.row == i + 1 && e.column == header[j])
                    .unwrap_or_else(|| panic!("{file} row {} column {} not in manifest", i + 1, header[j]));
                assert_eq!(e.value, c);
                assert_eq!(e.seed, 3);
                assert!(!e.run_id.is_empty() && !e.checkpoint.is_empty());
            }
        }
        assert_eq!(cells, manifest.entries.iter().filter(|e| e.file == file).count());
    }

    // regenerating from persisted artifacts is byte-identical
    let before = tree(&report);
    let mut again = args.to_vec();
    again[0] = "report";
    ok(&again);
    assert_eq!(before, tree(&report));
}
