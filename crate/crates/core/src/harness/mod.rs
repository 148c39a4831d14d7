//! Experiment suite: data generation, base pretraining, fine-tuned systems,
//! and the report tables, all cached on disk under one output root.
//!
//! Layout under the root:
//!
//! ```text
//! seed-<s>/data-<hash>/            dataset split
//! seed-<s>/base-<hash>/            pretrained checkpoint, run record, ledger
//! seed-<s>/groups-<hash>.jsonl     off-policy calibration groups
//! seed-<s>/pool-<hash>.jsonl       Best-of-N candidate pools
//! seed-<s>/runs/<run id>/          fine-tuned checkpoint, ledger, outputs
//! <experiment>/                    TSV/JSON reports and manifest.json
//! ```
//!
//! Artifacts are content-addressed by the hash of the config that produced
//! them, so experiments share work and `report` can rebuild every table
//! from persisted artifacts without training.

pub mod cli;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{gen_dataset, render_prompt, DatasetSplit, Pair, TargetNoise, TaskParams, TaskSpec};
use crate::decode::{beam_decode, sample_group, Hypothesis, SamplerConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::losses::{Objective, ScoredGroup};
use crate::metastats::{qe_eval, CorrelationReport};
use crate::model::Checkpoint;
use crate::quality::{MetricId, OracleConfig};
use crate::rng;
use crate::select::{bon_curve, fmt_num, CandidatePool};
use crate::train::{calibrate_sweep, pretrain_mle, RunRecord, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    MainTable,
    QeScatter,
    BeamVsBon,
    KSensitivity,
    CrossMetricGrid,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 5] = [
        ExperimentName::MainTable,
        ExperimentName::QeScatter,
        ExperimentName::BeamVsBon,
        ExperimentName::KSensitivity,
        ExperimentName::CrossMetricGrid,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentName::MainTable => "main_table",
            ExperimentName::QeScatter => "qe_scatter",
            ExperimentName::BeamVsBon => "beam_vs_bon",
            ExperimentName::KSensitivity => "k_sensitivity",
            ExperimentName::CrossMetricGrid => "cross_metric_grid",
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown experiment '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub task: TaskParams,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: TaskParams::default(),
            n_train: 4000,
            n_valid: 200,
            n_test: 300,
        }
    }
}

impl DataConfig {
    /// Task and split for `seed` (the seed drives both).
    pub fn generate(&self, seed: u64) -> Result<DatasetSplit> {
        let task = TaskSpec::generate(&TaskParams {
            seed,
            ..self.task.clone()
        })?;
        gen_dataset(&task, self.n_train, self.n_valid, self.n_test, seed)
    }
}

/// Default corruption of the pretraining corpus. Sources starting with one
/// of the first three source tokens are always left untranslated in their
/// training targets; every other source is left untranslated with
/// probability 0.3.
pub fn default_noise() -> TargetNoise {
    let first = crate::corpus::N_CONTROL as u32;
    TargetNoise {
        copy_rate: 1.0,
        copy_prefixes: vec![first, first + 1, first + 2],
        other_copy_rate: 0.3,
        token_rate: 0.0,
        seed: 0,
    }
}

/// Everything an experiment needs besides the seed list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub data: DataConfig,
    pub pretrain: TrainConfig,
    /// Template for the fine-tuned systems; objective, oracle and k are
    /// set per system.
    pub finetune: TrainConfig,
    pub objectives: Vec<Objective>,
    /// Swept for the main-table systems; other experiments reuse the rate
    /// selected there for the same objective.
    pub learning_rates: Vec<f64>,
    pub ks: Vec<usize>,
    pub bon_ns: Vec<usize>,
    pub bon_sampler: SamplerConfig,
    /// Hypotheses per test source in the likelihood-as-QE pool (a prefix
    /// of the Best-of-N pool).
    pub qe_pool_size: usize,
    pub beam_size: usize,
    pub grid_metrics: Vec<MetricId>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        let max_new = DataConfig::default().task.max_len + 4;
        Self {
            data: DataConfig::default(),
            pretrain: TrainConfig {
                noise: default_noise(),
                ..TrainConfig::pretrain()
            },
            finetune: TrainConfig::default(),
            objectives: vec![Objective::SftBon, Objective::CpoLike, Objective::Calibration],
            learning_rates: vec![1e-4, 3e-4, 1e-3],
            ks: vec![4, 8, 16],
            bon_ns: vec![1, 2, 4, 8, 16, 32],
            bon_sampler: SamplerConfig::off_policy(max_new, 0),
            qe_pool_size: 8,
            beam_size: 5,
            grid_metrics: MetricId::ALL.to_vec(),
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.pretrain.objective != Objective::Mle {
            return bad("pretrain.objective must be mle");
        }
        if self.objectives.is_empty() || self.objectives.contains(&Objective::Mle) {
            return bad("objectives must be a non-empty subset of sft_bon, cpo_like, calibration");
        }
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|&lr| lr.is_nan() || lr <= 0.0) {
            return bad("learning_rates must be non-empty and positive");
        }
        if self.ks.is_empty() || self.ks.iter().any(|&k| k < 2) {
            return bad("ks must be non-empty and >= 2");
        }
        if self.bon_ns.is_empty() || self.bon_ns.contains(&0) {
            return bad("bon_ns must be non-empty and >= 1");
        }
        if self.qe_pool_size < 1 || self.qe_pool_size > self.pool_size() {
            return bad("qe_pool_size must lie in 1..=max(bon_ns)");
        }
        if self.beam_size < 1 || self.grid_metrics.is_empty() {
            return bad("beam_size and grid_metrics must be non-empty");
        }
        if self.data.n_test == 0 || self.data.n_valid == 0 || self.data.n_train == 0 {
            return bad("every split needs at least one pair");
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.bon_sampler.validate()
    }

    fn pool_size(&self) -> usize {
        self.bon_ns.iter().copied().max().unwrap_or(1)
    }

    fn group_size(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(2).max(self.finetune.k)
    }

    /// The config with every seed-bearing field derived from `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = seed;
        c.pretrain.noise.seed = rng::mix(seed, 0x0015e);
        c.finetune.seed = seed;
        c.finetune.sampler.seed = rng::mix(seed, 0x6a0c);
        c.bon_sampler.seed = rng::mix(seed, 0xb0b);
        c
    }
}

/// Short content hash of any serializable value.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    hex::encode(&Sha256::digest(json.as_bytes())[..6])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub names: Vec<ExperimentName>,
    pub seeds: Vec<u64>,
    pub config: SuiteConfig,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.names.is_empty() {
            return Err(Error::InvalidConfig("no experiment named".into()));
        }
        self.config.validate()
    }
}

/// A fine-tuned (or base) system and its beam outputs on the test split.
#[derive(Debug, Clone)]
pub struct System {
    pub label: String,
    pub run_id: String,
    pub checkpoint: Checkpoint,
    pub record: Option<RunRecord>,
    pub outputs: Vec<Hypothesis>,
}

impl System {
    pub fn hash(&self) -> String {
        self.checkpoint.params_hash()
    }

    pub fn learning_rate(&self) -> Option<f64> {
        self.record.as_ref().map(|r| r.config.learning_rate)
    }

    pub fn score(&self, test: &[Pair], metric: MetricId) -> f64 {
        let total: f64 = self
            .outputs
            .iter()
            .zip(test)
            .map(|(h, p)| metric.score(h.output(), p))
            .sum();
        total / test.len() as f64
    }
}

/// Per-seed artifact cache.
pub struct SeedContext {
    pub seed: u64,
    pub dir: PathBuf,
    pub cfg: SuiteConfig,
    pub data: DatasetSplit,
    pub base: System,
    pub base_record: RunRecord,
    compute: bool,
    systems: BTreeMap<String, System>,
}

fn missing(path: &Path) -> Error {
    Error::Missing(format!("{} (run the experiment first)", path.display()))
}

fn decode_test(ckpt: &Checkpoint, test: &[Pair], beam: usize) -> Result<Vec<Hypothesis>> {
    let max_new = ckpt.params.config.max_seq_len;
    test.par_iter()
        .map(|p| beam_decode(&ckpt.params, &p.id, &render_prompt(p)?, beam, max_new))
        .collect()
}

fn save_run(dir: &Path, ckpt: &Checkpoint, record: &RunRecord, outputs: &[Hypothesis]) -> Result<()> {
    ckpt.save(&dir.join("checkpoint.bin"))?;
    io::write_json(&dir.join("run.json"), record)?;
    io::write_jsonl(&dir.join("ledger.jsonl"), &record.steps)?;
    io::write_jsonl(&dir.join("outputs.jsonl"), outputs)
}

fn load_run(dir: &Path) -> Result<(Checkpoint, RunRecord, Vec<Hypothesis>)> {
    Ok((
        Checkpoint::load(&dir.join("checkpoint.bin"))?,
        io::read_json(&dir.join("run.json"))?,
        io::read_jsonl(&dir.join("outputs.jsonl"))?,
    ))
}

impl SeedContext {
    /// Loads or builds the dataset and base model for `seed`. With
    /// `compute == false` every artifact must already exist.
    pub fn open(root: &Path, cfg: &SuiteConfig, seed: u64, compute: bool) -> Result<Self> {
        let cfg = cfg.seeded(seed);
        let dir = root.join(format!("seed-{seed}"));
        let data_dir = dir.join(format!("data-{}", config_hash(&(&cfg.data, seed))));
        let data = if data_dir.join("task.json").exists() {
            DatasetSplit::load(&data_dir)?
        } else if compute {
            let d = cfg.data.generate(seed)?;
            d.save(&data_dir)?;
            d
        } else {
            return Err(missing(&data_dir));
        };
        let base_key = config_hash(&(&cfg.pretrain, &cfg.data, seed, cfg.beam_size));
        let base_dir = dir.join(format!("base-{base_key}"));
        let (ckpt, record, outputs) = if base_dir.join("run.json").exists() {
            load_run(&base_dir)?
        } else if compute {
            let (ckpt, record) = pretrain_mle(&cfg.pretrain, &data)?;
            eprintln!("seed {seed}: pretrained base in {:.1}s", record.wall_clock_secs);
            let outputs = decode_test(&ckpt, &data.test, cfg.beam_size)?;
            save_run(&base_dir, &ckpt, &record, &outputs)?;
            (ckpt, record, outputs)
        } else {
            return Err(missing(&base_dir));
        };
        Ok(Self {
            seed,
            dir,
            base: System {
                label: "base".into(),
                run_id: record.run_id.clone(),
                checkpoint: ckpt,
                record: None,
                outputs,
            },
            base_record: record,
            cfg,
            data,
            compute,
            systems: BTreeMap::new(),
        })
    }

    fn sources(&self) -> &[Pair] {
        &self.data.train[..self.cfg.finetune.n_sources.min(self.data.train.len())]
    }

    /// Off-policy groups of the largest k for `oracle`, sampled once from
    /// the base model.
    pub fn groups(&self, oracle: &OracleConfig) -> Result<Vec<ScoredGroup>> {
        let k = self.cfg.group_size();
        let sampler = &self.cfg.finetune.sampler;
        let key = config_hash(&(sampler, oracle, k, self.base.hash(), self.sources().len()));
        let path = self.dir.join(format!("groups-{key}.jsonl"));
        if path.exists() {
            return io::read_jsonl(&path);
        }
        if !self.compute {
            return Err(missing(&path));
        }
        let groups =
            crate::train::sample_scored_groups(&self.base.checkpoint.params, self.sources(), k, sampler, oracle)?;
        io::write_jsonl(&path, &groups)?;
        Ok(groups)
    }

    /// Best-of-N candidate pools over the test split, scored by every metric.
    pub fn bon_pools(&self) -> Result<Vec<CandidatePool>> {
        let n = self.cfg.pool_size();
        let sampler = &self.cfg.bon_sampler;
        let key = config_hash(&(sampler, n, self.base.hash()));
        let path = self.dir.join(format!("pool-{key}.jsonl"));
        if path.exists() {
            return io::read_jsonl(&path);
        }
        if !self.compute {
            return Err(missing(&path));
        }
        let params = &self.base.checkpoint.params;
        let pools = self
            .data
            .test
            .par_iter()
            .map(|p| {
                let hyps = sample_group(params, &p.id, &render_prompt(p)?, sampler, n)?;
                CandidatePool::scored(p, hyps, &MetricId::ALL)
            })
            .collect::<Result<Vec<_>>>()?;
        io::write_jsonl(&path, &pools)?;
        Ok(pools)
    }

    /// A fine-tuned system. `lr = None` sweeps the configured rates.
    pub fn system(&mut self, objective: Objective, oracle: MetricId, k: usize, lr: Option<f64>) -> Result<System> {
        let mut cfg = TrainConfig {
            objective,
            oracle: OracleConfig::plain(oracle),
            k,
            beam_size: self.cfg.beam_size,
            ..self.cfg.finetune.clone()
        };
        let lrs = match lr {
            Some(lr) => vec![lr],
            None => self.cfg.learning_rates.clone(),
        };
        cfg.learning_rate = lrs[0];
        let key = format!(
            "{}-{}",
            objective.as_str(),
            config_hash(&(&cfg, &lrs, self.base.hash(), self.sources().len()))
        );
        if let Some(s) = self.systems.get(&key) {
            return Ok(s.clone());
        }
        let dir = self.dir.join("runs").join(&key);
        let (ckpt, record, outputs) = if dir.join("run.json").exists() {
            load_run(&dir)?
        } else if self.compute {
            let groups: Vec<ScoredGroup> = self.groups(&cfg.oracle)?.iter().map(|g| g.truncated(k)).collect();
            let (ckpt, record) = calibrate_sweep(
                &cfg,
                &lrs,
                self.sources(),
                &self.data.validation,
                &self.base.checkpoint,
                Some(&groups),
            )?;
            eprintln!(
                "seed {}: {} k={k} oracle={oracle} lr={} in {:.1}s",
                self.seed,
                objective.as_str(),
                record.config.learning_rate,
                record.wall_clock_secs
            );
            let outputs = decode_test(&ckpt, &self.data.test, self.cfg.beam_size)?;
            save_run(&dir, &ckpt, &record, &outputs)?;
            (ckpt, record, outputs)
        } else {
            return Err(missing(&dir));
        };
        let system = System {
            label: objective.as_str().to_string(),
            run_id: key.clone(),
            checkpoint: ckpt,
            record: Some(record),
            outputs,
        };
        self.systems.insert(key, system.clone());
        Ok(system)
    }

    /// The main-table system for `objective` (training oracle, full k,
    /// swept learning rate).
    pub fn main_system(&mut self, objective: Objective) -> Result<System> {
        let oracle = self.cfg.finetune.oracle.base_metric();
        let k = self.cfg.finetune.k;
        self.system(objective, oracle, k, None)
    }

    /// Learning rate selected for `objective` in the main table.
    pub fn selected_lr(&mut self, objective: Objective) -> Result<f64> {
        Ok(self
            .main_system(objective)?
            .learning_rate()
            .expect("fine-tuned systems carry a record"))
    }

    pub fn train_metric(&self) -> MetricId {
        self.cfg.finetune.oracle.base_metric()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainRow {
    pub seed: u64,
    pub system: String,
    pub learning_rate: Option<f64>,
    pub train_oracle: f64,
    pub ref_based_f: f64,
    pub ref_free_rule: f64,
    pub run_id: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QeRow {
    pub seed: u64,
    pub system: String,
    pub report: CorrelationReport,
    /// Beam translation quality (reference-based) of the same system.
    pub ref_based_f: f64,
    pub run_id: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub seed: u64,
    pub system: String,
    pub n: usize,
    pub mean_score: f64,
    pub run_id: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KRow {
    pub seed: u64,
    pub k: usize,
    pub system: String,
    pub train_oracle: f64,
    pub ref_based_f: f64,
    pub run_id: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub seed: u64,
    pub train_metric: String,
    pub eval_metric: String,
    pub value: f64,
    pub base_value: f64,
    pub delta: f64,
    pub run_id: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub experiment: String,
    pub code: String,
    pub detail: String,
}

/// Rows produced by one or more experiments.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub main: Vec<MainRow>,
    pub qe: Vec<QeRow>,
    pub curves: Vec<CurveRow>,
    pub k: Vec<KRow>,
    pub grid: Vec<GridRow>,
    pub failures: Vec<SeedFailure>,
    pub files: Vec<PathBuf>,
}

fn main_table(ctx: &mut SeedContext, out: &mut ExperimentOutput) -> Result<()> {
    let tm = ctx.train_metric();
    let test = ctx.data.test.clone();
    let mut systems = vec![ctx.base.clone()];
    for obj in ctx.cfg.objectives.clone() {
        systems.push(ctx.main_system(obj)?);
    }
    for s in systems {
        out.main.push(MainRow {
            seed: ctx.seed,
            system: s.label.clone(),
            learning_rate: s.learning_rate(),
            train_oracle: s.score(&test, tm),
            ref_based_f: s.score(&test, MetricId::RefBasedF),
            ref_free_rule: s.score(&test, MetricId::RefFreeRule),
            run_id: s.run_id.clone(),
            checkpoint: s.hash(),
        });
    }
    Ok(())
}

fn qe_scatter(ctx: &mut SeedContext, out: &mut ExperimentOutput) -> Result<()> {
    let pools = ctx.bon_pools()?;
    let test = ctx.data.test.clone();
    let items: Vec<(&Pair, &Hypothesis)> = pools
        .iter()
        .zip(&test)
        .flat_map(|(pool, pair)| {
            pool.candidates
                .iter()
                .take(ctx.cfg.qe_pool_size)
                .map(move |h| (pair, h))
        })
        .collect();
    let mut systems = vec![ctx.base.clone()];
    for obj in ctx.cfg.objectives.clone() {
        systems.push(ctx.main_system(obj)?);
    }
    for s in systems {
        let report = qe_eval(&s.checkpoint.params, &items, MetricId::RefBasedF)?;
        out.qe.push(QeRow {
            seed: ctx.seed,
            system: s.label.clone(),
            report,
            ref_based_f: s.score(&test, MetricId::RefBasedF),
            run_id: s.run_id.clone(),
            checkpoint: s.hash(),
        });
    }
    Ok(())
}

fn beam_vs_bon(ctx: &mut SeedContext, out: &mut ExperimentOutput) -> Result<()> {
    let pools = ctx.bon_pools()?;
    let test = ctx.data.test.clone();
    let ns = ctx.cfg.bon_ns.clone();
    let curve = bon_curve(&pools, &test, &ns, MetricId::RefFreeRule, MetricId::RefBasedF)?;
    let base = ctx.base.clone();
    for (n, v) in curve {
        out.curves.push(CurveRow {
            seed: ctx.seed,
            system: "base_bon".into(),
            n,
            mean_score: v,
            run_id: base.run_id.clone(),
            checkpoint: base.hash(),
        });
    }
    let beam = ctx.cfg.beam_size;
    let calibrated = ctx.main_system(Objective::Calibration)?;
    for s in [&base, &calibrated] {
        let v = s.score(&test, MetricId::RefBasedF);
        let label = if s.label == "base" { "base" } else { "calibrated" };
        for &n in &ns {
            out.curves.push(CurveRow {
                seed: ctx.seed,
                system: format!("{label}_beam{beam}"),
                n,
                mean_score: v,
                run_id: s.run_id.clone(),
                checkpoint: s.hash(),
            });
        }
    }
    Ok(())
}

fn k_sensitivity(ctx: &mut SeedContext, out: &mut ExperimentOutput) -> Result<()> {
    let tm = ctx.train_metric();
    let test = ctx.data.test.clone();
    for obj in ctx.cfg.objectives.clone() {
        let lr = ctx.selected_lr(obj)?;
        for k in ctx.cfg.ks.clone() {
            if k < 2 && obj != Objective::SftBon {
                continue;
            }
            let s = if k == ctx.cfg.finetune.k {
                ctx.main_system(obj)?
            } else {
                ctx.system(obj, tm, k, Some(lr))?
            };
            out.k.push(KRow {
                seed: ctx.seed,
                k,
                system: s.label.clone(),
                train_oracle: s.score(&test, tm),
                ref_based_f: s.score(&test, MetricId::RefBasedF),
                run_id: s.run_id.clone(),
                checkpoint: s.hash(),
            });
        }
    }
    Ok(())
}

fn cross_metric_grid(ctx: &mut SeedContext, out: &mut ExperimentOutput) -> Result<()> {
    let test = ctx.data.test.clone();
    let lr = ctx.selected_lr(Objective::Calibration)?;
    let k = ctx.cfg.finetune.k;
    let base = ctx.base.clone();
    for train_metric in ctx.cfg.grid_metrics.clone() {
        let s = if train_metric == ctx.train_metric() {
            ctx.main_system(Objective::Calibration)?
        } else {
            ctx.system(Objective::Calibration, train_metric, k, Some(lr))?
        };
        for eval_metric in ctx.cfg.grid_metrics.clone() {
            let value = s.score(&test, eval_metric);
            let base_value = base.score(&test, eval_metric);
            out.grid.push(GridRow {
                seed: ctx.seed,
                train_metric: train_metric.to_string(),
                eval_metric: eval_metric.to_string(),
                value,
                base_value,
                delta: value - base_value,
                run_id: s.run_id.clone(),
                checkpoint: s.hash(),
            });
        }
    }
    Ok(())
}

fn run_one(name: ExperimentName, ctx: &mut SeedContext, out: &mut ExperimentOutput) -> Result<()> {
    match name {
        ExperimentName::MainTable => main_table(ctx, out),
        ExperimentName::QeScatter => qe_scatter(ctx, out),
        ExperimentName::BeamVsBon => beam_vs_bon(ctx, out),
        ExperimentName::KSensitivity => k_sensitivity(ctx, out),
        ExperimentName::CrossMetricGrid => cross_metric_grid(ctx, out),
    }
}

/// Runs (or, with `compute == false`, only re-reports) the named
/// experiments for every seed, then writes report files. Per-seed failures
/// are collected instead of aborting the remaining seeds.
pub fn run_experiment(spec: &ExperimentSpec, compute: bool) -> Result<ExperimentOutput> {
    spec.validate()?;
    let mut out = ExperimentOutput::default();
    for &seed in &spec.seeds {
        let mut ctx = match SeedContext::open(&spec.out_dir, &spec.config, seed, compute) {
            Ok(c) => c,
            Err(e) => {
                for name in &spec.names {
                    out.failures.push(SeedFailure {
                        seed,
                        experiment: name.to_string(),
                        code: e.code().into(),
                        detail: e.to_string(),
                    });
                }
                continue;
            }
        };
        for &name in &spec.names {
            if let Err(e) = run_one(name, &mut ctx, &mut out) {
                out.failures.push(SeedFailure {
                    seed,
                    experiment: name.to_string(),
                    code: e.code().into(),
                    detail: e.to_string(),
                });
            }
        }
    }
    write_reports(spec, &mut out)?;
    Ok(out)
}

/// One numeric cell of a report and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub row: usize,
    pub column: String,
    pub value: String,
    pub seed: u64,
    pub run_id: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiments: Vec<String>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub config: SuiteConfig,
    pub entries: Vec<ManifestEntry>,
    pub failures: Vec<SeedFailure>,
}

/// A TSV table whose numeric cells are all listed in the manifest.
struct Table {
    file: String,
    header: Vec<&'static str>,
    rows: Vec<TableRow>,
}

struct TableRow {
    cells: Vec<String>,
    /// Indices of the cells holding reported numbers.
    numeric: Vec<usize>,
    seed: u64,
    run_id: String,
    checkpoint: String,
}

impl Table {
    fn new(file: &str, header: Vec<&'static str>) -> Self {
        Self {
            file: file.into(),
            header,
            rows: Vec::new(),
        }
    }

    fn push(&mut self, cells: Vec<String>, numeric: Vec<usize>, seed: u64, run_id: String, checkpoint: String) {
        self.rows.push(TableRow {
            cells,
            numeric,
            seed,
            run_id,
            checkpoint,
        });
    }

    fn tsv(&self) -> String {
        let mut s = self.header.join("\t");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.cells.join("\t"));
            s.push('\n');
        }
        s
    }

    fn entries(&self) -> Vec<ManifestEntry> {
        let mut v = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            for &c in &r.numeric {
                v.push(ManifestEntry {
                    file: self.file.clone(),
                    row: i + 1,
                    column: self.header[c].to_string(),
                    value: r.cells[c].clone(),
                    seed: r.seed,
                    run_id: r.run_id.clone(),
                    checkpoint: r.checkpoint.clone(),
                });
            }
        }
        v
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_else(|| "-".into())
}

fn tables(out: &ExperimentOutput) -> Vec<Table> {
    let mut tables = Vec::new();
    if !out.main.is_empty() {
        let mut t = Table::new(
            "main_table.tsv",
            vec![
                "seed",
                "system",
                "learning_rate",
                "train_oracle",
                "ref_based_f",
                "ref_free_rule",
            ],
        );
        for r in &out.main {
            let lr_numeric = if r.learning_rate.is_some() {
                vec![2, 3, 4, 5]
            } else {
                vec![3, 4, 5]
            };
            t.push(
                vec![
                    r.seed.to_string(),
                    r.system.clone(),
                    opt_num(r.learning_rate),
                    fmt_num(r.train_oracle),
                    fmt_num(r.ref_based_f),
                    fmt_num(r.ref_free_rule),
                ],
                lr_numeric,
                r.seed,
                r.run_id.clone(),
                r.checkpoint.clone(),
            );
        }
        tables.push(t);
    }
    if !out.qe.is_empty() {
        let mut t = Table::new(
            "qe_scatter.tsv",
            vec![
                "seed",
                "system",
                "spearman",
                "pearson",
                "kendall_tau_b",
                "n",
                "ref_based_f",
            ],
        );
        for r in &out.qe {
            t.push(
                vec![
                    r.seed.to_string(),
                    r.system.clone(),
                    fmt_num(r.report.spearman),
                    fmt_num(r.report.pearson),
                    fmt_num(r.report.kendall_tau_b),
                    r.report.n.to_string(),
                    fmt_num(r.ref_based_f),
                ],
                vec![2, 3, 4, 5, 6],
                r.seed,
                r.run_id.clone(),
                r.checkpoint.clone(),
            );
        }
        tables.push(t);
    }
    if !out.curves.is_empty() {
        let mut t = Table::new("beam_vs_bon.tsv", vec!["seed", "system", "n", "mean_score"]);
        for r in &out.curves {
            t.push(
                vec![
                    r.seed.to_string(),
                    r.system.clone(),
                    r.n.to_string(),
                    fmt_num(r.mean_score),
                ],
                vec![3],
                r.seed,
                r.run_id.clone(),
                r.checkpoint.clone(),
            );
        }
        tables.push(t);
    }
    if !out.k.is_empty() {
        let mut t = Table::new(
            "k_sensitivity.tsv",
            vec!["seed", "k", "system", "train_oracle", "ref_based_f"],
        );
        for r in &out.k {
            t.push(
                vec![
                    r.seed.to_string(),
                    r.k.to_string(),
                    r.system.clone(),
                    fmt_num(r.train_oracle),
                    fmt_num(r.ref_based_f),
                ],
                vec![3, 4],
                r.seed,
                r.run_id.clone(),
                r.checkpoint.clone(),
            );
        }
        tables.push(t);
    }
    if !out.grid.is_empty() {
        let mut t = Table::new(
            "cross_metric_grid.tsv",
            vec!["seed", "train_metric", "eval_metric", "value", "base_value", "delta"],
        );
        for r in &out.grid {
            t.push(
                vec![
                    r.seed.to_string(),
                    r.train_metric.clone(),
                    r.eval_metric.clone(),
                    fmt_num(r.value),
                    fmt_num(r.base_value),
                    fmt_num(r.delta),
                ],
                vec![3, 4, 5],
                r.seed,
                r.run_id.clone(),
                r.checkpoint.clone(),
            );
        }
        tables.push(t);
    }
    tables
}

fn report_dir(spec: &ExperimentSpec) -> PathBuf {
    let names: Vec<&str> = spec.names.iter().map(|n| n.as_str()).collect();
    spec.out_dir.join(names.join("+"))
}

fn write_reports(spec: &ExperimentSpec, out: &mut ExperimentOutput) -> Result<()> {
    let dir = report_dir(spec);
    let mut entries = Vec::new();
    for t in tables(out) {
        let path = dir.join(&t.file);
        io::write_string(&path, &t.tsv())?;
        entries.extend(t.entries());
        out.files.push(path);
    }
    if !out.qe.is_empty() {
        let reports: Vec<&CorrelationReport> = out.qe.iter().map(|r| &r.report).collect();
        let path = dir.join("qe_reports.json");
        io::write_json(&path, &reports)?;
        out.files.push(path);
    }
    let manifest = Manifest {
        experiments: spec.names.iter().map(|n| n.to_string()).collect(),
        seeds: spec.seeds.clone(),
        config_hash: config_hash(&spec.config),
        config: spec.config.clone(),
        entries,
        failures: out.failures.clone(),
    };
    let path = dir.join("manifest.json");
    io::write_json(&path, &manifest)?;
    out.files.push(path);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_names_round_trip() {
        for n in ExperimentName::ALL {
            assert_eq!(n.as_str().parse::<ExperimentName>().unwrap(), n);
        }
        assert!("nope".parse::<ExperimentName>().is_err());
    }

    #[test]
    fn default_suite_is_valid() {
        SuiteConfig::default().validate().unwrap();
        let bad = SuiteConfig {
            ks: vec![],
            ..SuiteConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn seeding_touches_every_seed_field() {
        let a = SuiteConfig::default().seeded(7);
        let b = SuiteConfig::default().seeded(11);
        assert_ne!(a.pretrain.seed, b.pretrain.seed);
        assert_ne!(a.finetune.sampler.seed, b.finetune.sampler.seed);
        assert_ne!(a.bon_sampler.seed, b.bon_sampler.seed);
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
