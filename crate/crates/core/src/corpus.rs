//! Synthetic translation task.
//!
//! A target is the reversed source with every token passed through a
//! substitution map. Some source tokens carry a second acceptable target
//! token (a synonym); references always use the primary choice, so a
//! reference-free checker and a reference-based overlap metric can disagree.
//!
//! Token layout: `PAD=0, BOS=1, SEP=2, EOS=3`, then the source alphabet,
//! then the target alphabet.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rng;

pub type Token = u32;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const SEP: Token = 2;
pub const EOS: Token = 3;
pub const N_CONTROL: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    /// `substitution_map[i]` is the primary target token for source token
    /// `N_CONTROL + i`.
    pub substitution_map: Vec<Token>,
    /// Source token -> alternate target token.
    pub synonym_set: BTreeMap<Token, Token>,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

/// Knobs for [`TaskSpec::generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub n_synonyms: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            source_vocab_size: 12,
            target_vocab_size: 20,
            n_synonyms: 4,
            min_len: 4,
            max_len: 10,
            seed: 7,
        }
    }
}

impl TaskSpec {
    /// Draws a random substitution bijection and synonym alternates.
    pub fn generate(p: &TaskParams) -> Result<Self> {
        if p.source_vocab_size < 2 || p.target_vocab_size < 2 {
            return Err(Error::InvalidTask("vocabulary sizes must be >= 2".into()));
        }
        if p.target_vocab_size < p.source_vocab_size + p.n_synonyms {
            return Err(Error::InvalidTask(format!(
                "target vocab {} cannot hold {} primaries and {} alternates",
                p.target_vocab_size, p.source_vocab_size, p.n_synonyms
            )));
        }
        if p.n_synonyms > p.source_vocab_size {
            return Err(Error::InvalidTask("more synonyms than source tokens".into()));
        }
        let mut r = rng::rng(rng::mix(p.seed, 0x7a5c));
        let target_base = (N_CONTROL + p.source_vocab_size) as Token;
        let mut targets: Vec<Token> = (0..p.target_vocab_size as Token).map(|i| target_base + i).collect();
        targets.shuffle(&mut r);
        let substitution_map = targets[..p.source_vocab_size].to_vec();
        let alternates = &targets[p.source_vocab_size..p.source_vocab_size + p.n_synonyms];
        let mut sources: Vec<Token> = (0..p.source_vocab_size as Token)
            .map(|i| N_CONTROL as Token + i)
            .collect();
        sources.shuffle(&mut r);
        let synonym_set = sources[..p.n_synonyms]
            .iter()
            .copied()
            .zip(alternates.iter().copied())
            .collect();
        let task = Self {
            source_vocab_size: p.source_vocab_size,
            target_vocab_size: p.target_vocab_size,
            substitution_map,
            synonym_set,
            min_len: p.min_len,
            max_len: p.max_len,
            seed: p.seed,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn vocab_size(&self) -> usize {
        N_CONTROL + self.source_vocab_size + self.target_vocab_size
    }

    pub fn source_range(&self) -> std::ops::Range<Token> {
        N_CONTROL as Token..(N_CONTROL + self.source_vocab_size) as Token
    }

    pub fn target_range(&self) -> std::ops::Range<Token> {
        let lo = (N_CONTROL + self.source_vocab_size) as Token;
        lo..lo + self.target_vocab_size as Token
    }

    /// Longest prompt `[BOS] + source + [SEP]`.
    pub fn max_prompt_len(&self) -> usize {
        self.max_len + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_vocab_size < 2 || self.target_vocab_size < 2 {
            return Err(Error::InvalidTask("vocabulary sizes must be >= 2".into()));
        }
        if self.min_len < 1 || self.max_len < self.min_len {
            return Err(Error::InvalidTask(format!(
                "need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.substitution_map.len() != self.source_vocab_size {
            return Err(Error::InvalidTask(
                "substitution map must cover the source alphabet".into(),
            ));
        }
        let targets = self.target_range();
        let mut primaries = BTreeSet::new();
        for &t in &self.substitution_map {
            if !targets.contains(&t) || !primaries.insert(t) {
                return Err(Error::InvalidTask(format!(
                    "substitution map is not a bijection into targets (token {t})"
                )));
            }
        }
        let mut alternates = BTreeSet::new();
        for (&s, &a) in &self.synonym_set {
            if !self.source_range().contains(&s) {
                return Err(Error::InvalidTask(format!("synonym key {s} is not a source token")));
            }
            if !targets.contains(&a) || primaries.contains(&a) || !alternates.insert(a) {
                return Err(Error::InvalidTask(format!(
                    "synonym alternate {a} collides or is out of range"
                )));
            }
        }
        Ok(())
    }

    pub fn primary(&self, source_token: Token) -> Token {
        self.substitution_map[(source_token as usize) - N_CONTROL]
    }

    /// Acceptable target tokens for one source token, primary first.
    pub fn valid_targets(&self, source_token: Token) -> Vec<Token> {
        let mut v = vec![self.primary(source_token)];
        if let Some(&alt) = self.synonym_set.get(&source_token) {
            v.push(alt);
        }
        v
    }

    pub fn make_pair(&self, id: String, source: Vec<Token>) -> Pair {
        let reference = source.iter().rev().map(|&s| self.primary(s)).collect();
        let valid_target_sets = source.iter().rev().map(|&s| self.valid_targets(s)).collect();
        Pair {
            id,
            source,
            reference,
            valid_target_sets,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: Self = io::read_json(path)?;
        t.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub id: String,
    pub source: Vec<Token>,
    pub reference: Vec<Token>,
    pub valid_target_sets: Vec<Vec<Token>>,
}

impl Pair {
    pub fn has_synonym_position(&self) -> bool {
        self.valid_target_sets.iter().any(|s| s.len() > 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub task: TaskSpec,
    pub train: Vec<Pair>,
    pub validation: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl DatasetSplit {
    pub fn all_pairs(&self) -> impl Iterator<Item = &Pair> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    pub fn find(&self, id: &str) -> Option<&Pair> {
        self.all_pairs().find(|p| p.id == id)
    }

    /// Writes `task.json`, `train.jsonl`, `validation.jsonl`, `test.jsonl`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.task.save(&dir.join("task.json"))?;
        io::write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        io::write_jsonl(&dir.join("validation.jsonl"), &self.validation)?;
        io::write_jsonl(&dir.join("test.jsonl"), &self.test)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            task: TaskSpec::load(&dir.join("task.json"))?,
            train: io::read_jsonl(&dir.join("train.jsonl"))?,
            validation: io::read_jsonl(&dir.join("validation.jsonl"))?,
            test: io::read_jsonl(&dir.join("test.jsonl"))?,
        })
    }
}

/// Generates train/validation/test splits. Lengths and tokens are uniform.
pub fn gen_dataset(task: &TaskSpec, n_train: usize, n_valid: usize, n_test: usize, seed: u64) -> Result<DatasetSplit> {
    task.validate()?;
    let split = |name: &str, n: usize, label: u64| -> Vec<Pair> {
        let mut r = rng::rng(rng::mix(seed, label));
        let src = task.source_range();
        (0..n)
            .map(|i| {
                let len = r.random_range(task.min_len..=task.max_len);
                let source = (0..len).map(|_| r.random_range(src.clone())).collect();
                task.make_pair(format!("{name}-{i:05}"), source)
            })
            .collect()
    };
    Ok(DatasetSplit {
        task: task.clone(),
        train: split("train", n_train, 1),
        validation: split("valid", n_valid, 2),
        test: split("test", n_test, 3),
    })
}

/// Corruption applied to pretraining targets only. A noisy pair keeps its
/// clean reference; only the sequence the model is trained to emit changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetNoise {
    /// Probability that the target is replaced by an untranslated copy of
    /// the source, for sources starting with one of `copy_prefixes`.
    pub copy_rate: f64,
    /// First source tokens that make a pair copy-prone. Empty means every
    /// pair is.
    pub copy_prefixes: Vec<Token>,
    /// Copy probability for the remaining pairs when `copy_prefixes` is
    /// non-empty.
    #[serde(default)]
    pub other_copy_rate: f64,
    /// Per-token probability of replacing a target token by a uniform draw
    /// from the target alphabet.
    pub token_rate: f64,
    pub seed: u64,
}

impl Default for TargetNoise {
    fn default() -> Self {
        Self {
            copy_rate: 0.0,
            copy_prefixes: Vec::new(),
            other_copy_rate: 0.0,
            token_rate: 0.0,
            seed: 0,
        }
    }
}

impl TargetNoise {
    pub fn is_clean(&self) -> bool {
        self.copy_rate == 0.0 && self.other_copy_rate == 0.0 && self.token_rate == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("copy_rate", self.copy_rate),
            ("other_copy_rate", self.other_copy_rate),
            ("token_rate", self.token_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Whether `copy_rate` (rather than `other_copy_rate`) applies to `pair`.
    pub fn copy_prone(&self, pair: &Pair) -> bool {
        self.copy_prefixes.is_empty() || pair.source.first().is_some_and(|t| self.copy_prefixes.contains(t))
    }

    fn copy_probability(&self, pair: &Pair) -> f64 {
        if self.copy_prone(pair) {
            self.copy_rate
        } else {
            self.other_copy_rate
        }
    }

    /// The training target for `pair` (without EOS). Fixed per pair id, so
    /// every epoch sees the same corrupted corpus.
    pub fn target(&self, task: &TaskSpec, pair: &Pair) -> Vec<Token> {
        if self.is_clean() {
            return pair.reference.clone();
        }
        let mut r = rng::rng(rng::mix_str(self.seed, &pair.id));
        if r.random_bool(self.copy_probability(pair)) {
            return pair.source.clone();
        }
        let targets = task.target_range();
        pair.reference
            .iter()
            .map(|&t| {
                if r.random_bool(self.token_rate) {
                    r.random_range(targets.clone())
                } else {
                    t
                }
            })
            .collect()
    }
}

/// `[BOS] + source + [SEP]`.
pub fn render_prompt(pair: &Pair) -> Result<Vec<Token>> {
    if pair.source.is_empty() {
        return Err(Error::Precondition(format!("pair {} has an empty source", pair.id)));
    }
    let mut out = Vec::with_capacity(pair.source.len() + 2);
    out.push(BOS);
    out.extend_from_slice(&pair.source);
    out.push(SEP);
    Ok(out)
}

/// Inverse of [`render_prompt`].
pub fn strip_prompt(prompt: &[Token]) -> Option<&[Token]> {
    match prompt {
        [BOS, body @ .., SEP] => Some(body),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_task() -> TaskSpec {
        let s = 4;
        TaskSpec {
            source_vocab_size: s,
            target_vocab_size: s,
            substitution_map: (0..s as Token).map(|i| (N_CONTROL + s) as Token + i).collect(),
            synonym_set: BTreeMap::new(),
            min_len: 1,
            max_len: 5,
            seed: 0,
        }
    }

    #[test]
    fn reversal_law_on_identity_substitution() {
        let task = identity_task();
        let src = |i: Token| N_CONTROL as Token + i;
        let tgt = |i: Token| (N_CONTROL + 4) as Token + i;
        let pair = task.make_pair("p".into(), vec![src(3), src(1), src(2)]);
        assert_eq!(pair.reference, vec![tgt(2), tgt(1), tgt(3)]);
    }

    #[test]
    fn rejects_bad_tasks() {
        let mut p = TaskParams {
            source_vocab_size: 1,
            ..TaskParams::default()
        };
        assert!(TaskSpec::generate(&p).is_err());
        p.source_vocab_size = 12;
        p.min_len = 5;
        p.max_len = 4;
        assert!(TaskSpec::generate(&p).is_err());
        let mut t = TaskSpec::generate(&TaskParams::default()).unwrap();
        t.max_len = 0;
        assert!(gen_dataset(&t, 1, 1, 1, 0).is_err());
    }

    #[test]
    fn prompt_rendering() {
        let task = identity_task();
        let pair = task.make_pair("p".into(), vec![5, 7]);
        assert_eq!(render_prompt(&pair).unwrap(), vec![BOS, 5, 7, SEP]);
        let empty = Pair {
            id: "e".into(),
            source: vec![],
            reference: vec![],
            valid_target_sets: vec![],
        };
        assert!(matches!(render_prompt(&empty), Err(Error::Precondition(_))));
    }

    #[test]
    fn default_task_vocab_is_36() {
        let t = TaskSpec::generate(&TaskParams::default()).unwrap();
        assert_eq!(t.vocab_size(), 36);
        assert_eq!(t.synonym_set.len(), 4);
    }
}
