use std::collections::BTreeMap;

use calib_core::corpus::*;
use calib_core::Error;
use proptest::prelude::*;

fn default_task(seed: u64) -> TaskSpec {
    TaskSpec::generate(&TaskParams {
        seed,
        ..TaskParams::default()
    })
    .unwrap()
}

fn identity_task() -> TaskSpec {
    // sources 4..7 map to targets 7..10 in order
    TaskSpec {
        source_vocab_size: 3,
        target_vocab_size: 3,
        substitution_map: vec![7, 8, 9],
        synonym_set: BTreeMap::new(),
        min_len: 1,
        max_len: 5,
        seed: 0,
    }
}

#[test]
fn splits_are_byte_identical_for_the_same_seed() {
    let task = default_task(3);
    let a = gen_dataset(&task, 50, 10, 10, 9).unwrap();
    let b = gen_dataset(&task, 50, 10, 10, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    a.save(&dir.path().join("a")).unwrap();
    b.save(&dir.path().join("b")).unwrap();
    for f in ["task.json", "train.jsonl", "validation.jsonl", "test.jsonl"] {
        let x = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    assert_eq!(DatasetSplit::load(&dir.path().join("a")).unwrap(), a);
}

#[test]
fn identity_substitution_reverses() {
    let task = identity_task();
    // source tokens 4,5,6 play the roles of 1,2,3 with identity-like targets
    let p = task.make_pair("p".into(), vec![6, 4, 5]);
    assert_eq!(p.reference, vec![8, 7, 9]);
}

#[test]
fn inverse_transform_recovers_every_source() {
    let task = default_task(7);
    let inverse: BTreeMap<Token, Token> = task
        .substitution_map
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, (N_CONTROL + i) as Token))
        .collect();
    let data = gen_dataset(&task, 1000, 0, 0, 1).unwrap();
    assert_eq!(data.train.len(), 1000);
    for p in &data.train {
        let back: Vec<Token> = p.reference.iter().rev().map(|t| inverse[t]).collect();
        assert_eq!(back, p.source);
        assert_eq!(p.reference.len(), p.source.len());
        for (j, set) in p.valid_target_sets.iter().enumerate() {
            assert!(set.contains(&p.reference[j]));
        }
    }
}

#[test]
fn split_sizes_and_ids() {
    let task = default_task(2);
    let d = gen_dataset(&task, 30, 7, 5, 2).unwrap();
    assert_eq!((d.train.len(), d.validation.len(), d.test.len()), (30, 7, 5));
    let mut ids: Vec<&str> = d.all_pairs().map(|p| p.id.as_str()).collect();
    let n = ids.len();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), n);
    for p in d.all_pairs() {
        assert!((task.min_len..=task.max_len).contains(&p.source.len()));
        assert!(p.source.iter().all(|t| task.source_range().contains(t)));
    }
}

#[test]
fn invalid_tasks_are_rejected() {
    let bad = TaskParams {
        source_vocab_size: 1,
        ..TaskParams::default()
    };
    assert!(matches!(TaskSpec::generate(&bad), Err(Error::InvalidTask(_))));
    let bad = TaskParams {
        min_len: 6,
        max_len: 5,
        ..TaskParams::default()
    };
    assert!(matches!(TaskSpec::generate(&bad), Err(Error::InvalidTask(_))));
}

#[test]
fn prompt_layout() {
    let task = identity_task();
    let p = task.make_pair("p".into(), vec![5, 6]);
    assert_eq!(render_prompt(&p).unwrap(), vec![BOS, 5, 6, SEP]);
    let empty = Pair {
        id: "e".into(),
        source: vec![],
        reference: vec![],
        valid_target_sets: vec![],
    };
    assert!(matches!(render_prompt(&empty), Err(Error::Precondition(_))));
}

#[test]
fn render_strip_round_trip() {
    let task = default_task(5);
    let data = gen_dataset(&task, 1000, 0, 0, 5).unwrap();
    for p in &data.train {
        let prompt = render_prompt(p).unwrap();
        assert_eq!(strip_prompt(&prompt).unwrap(), &p.source[..]);
    }
}

#[test]
fn target_noise_is_fixed_per_pair() {
    let task = default_task(7);
    let data = gen_dataset(&task, 400, 0, 0, 7).unwrap();
    let noise = TargetNoise {
        copy_rate: 0.5,
        copy_prefixes: vec![N_CONTROL as Token],
        token_rate: 0.1,
        seed: 3,
        ..TargetNoise::default()
    };
    let mut copies = 0;
    for p in &data.train {
        let t = noise.target(&task, p);
        assert_eq!(t, noise.target(&task, p));
        assert_eq!(t.len(), p.reference.len());
        if t == p.source {
            copies += 1;
            assert_eq!(p.source[0], N_CONTROL as Token);
        }
    }
    assert!(copies > 0);
    assert!(TargetNoise::default().is_clean());
    assert_eq!(
        TargetNoise::default().target(&task, &data.train[0]),
        data.train[0].reference
    );
    let bad = TargetNoise {
        copy_rate: 1.5,
        ..TargetNoise::default()
    };
    assert!(bad.validate().is_err());

    // every pair outside the prefixes is copied at rate one
    let others = TargetNoise {
        copy_prefixes: vec![N_CONTROL as Token],
        other_copy_rate: 1.0,
        ..TargetNoise::default()
    };
    for p in &data.train {
        let copied = others.target(&task, p) == p.source;
        assert_eq!(copied, p.source[0] != N_CONTROL as Token);
    }
}

proptest! {
    #[test]
    fn every_generated_pair_satisfies_the_transform_law(seed in 0u64..500, n in 1usize..40) {
        let task = default_task(seed);
        let d = gen_dataset(&task, n, 0, 0, seed).unwrap();
        for p in &d.train {
            let l = p.source.len();
            for j in 0..l {
                prop_assert_eq!(p.reference[j], task.primary(p.source[l - 1 - j]));
                prop_assert_eq!(&p.valid_target_sets[j], &task.valid_targets(p.source[l - 1 - j]));
            }
        }
    }
}
