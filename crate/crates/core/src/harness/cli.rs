//! Command-line front end. Every subcommand reads an optional JSON config,
//! applies `--seed`, and writes under `--out` (default `$CALIB_SEQ_OUT`,
//! then `./out`). Failures print `E_CODE: detail` on one line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{run_experiment, DataConfig, ExperimentName, ExperimentSpec, SuiteConfig};
use crate::corpus::{render_prompt, DatasetSplit, Pair};
use crate::decode::{beam_decode, load_pool, sample_group, save_pool, Hypothesis, SamplerConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::metastats::{correlation_report, CorrelationReport};
use crate::model::Checkpoint;
use crate::quality::{score_values, MetricId, OracleConfig, ScoredRow};
use crate::select::{best_of_n, mbr, CandidatePool};
use crate::train::{calibrate, pretrain_mle, TrainConfig};

pub const OUT_ENV: &str = "CALIB_SEQ_OUT";

#[derive(Debug, Parser)]
#[command(name = "calib-seq", version, about = "Likelihood-quality calibration lab")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON config for the subcommand; missing fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed field of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root (default: $CALIB_SEQ_OUT, then ./out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 1 gives byte-identical reruns.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    fn pick<'a>(&self, data: &'a DatasetSplit) -> &'a [Pair] {
        match self {
            SplitName::Train => &data.train,
            SplitName::Validation => &data.validation,
            SplitName::Test => &data.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    Bon,
    Mbr,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a task and its train/validation/test splits.
    GenData,
    /// MLE-pretrain a base model.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Sample k hypotheses per source.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Score a hypothesis pool with an oracle.
    Score {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune a base checkpoint (sft_bon, cpo_like or calibration).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
    },
    /// Beam-decode a split.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        #[arg(long, default_value_t = 5)]
        beam: usize,
    },
    /// Pick one hypothesis per source from a pool.
    Select {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "bon")]
        strategy: Strategy,
        /// Pool prefix size for Best-of-N (default: whole pool).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value = "ref_free_rule")]
        rerank: String,
        #[arg(long, default_value = "ref_based_f")]
        eval: String,
    },
    /// Correlation statistics of two columns (TSV with a header, or scored
    /// JSONL rows from `score`).
    MetaEval {
        #[arg(long)]
        input: PathBuf,
        /// Metric id for column a (JSONL input only).
        #[arg(long, default_value = "avg_logprob")]
        column_a: String,
        /// Metric id for column b (JSONL input only).
        #[arg(long, default_value = "ref_based_f")]
        column_b: String,
    },
    /// Run experiments end to end (cached under --out).
    Experiment {
        /// Experiment names, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        name: Vec<String>,
        /// Seeds, comma separated (default 7,11,13; --seed selects one).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Rebuild experiment reports from persisted artifacts without training.
    Report {
        #[arg(long, value_delimiter = ',', required = true)]
        name: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

/// Config of `sample`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub k: usize,
    pub sampler: SamplerConfig,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            k: 16,
            sampler: SamplerConfig::off_policy(14, 0),
        }
    }
}

/// Config of `score`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    pub oracles: Vec<OracleConfig>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            oracles: vec![OracleConfig::RefBasedF, OracleConfig::RefFreeRule],
        }
    }
}

/// Result of `select`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectSummary {
    pub strategy: String,
    pub n: usize,
    pub rerank: String,
    pub eval: String,
    pub mean_score: f64,
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => io::read_json(p),
        None => Ok(T::default()),
    }
}

fn out_root(arg: Option<&Path>) -> PathBuf {
    arg.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn parse_metric(s: &str) -> Result<MetricId> {
    MetricId::ALL
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown metric '{s}'")))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if path.is_dir() {
        Checkpoint::load(&path.join("checkpoint.bin"))
    } else {
        Checkpoint::load(path)
    }
}

fn check_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing(path.display().to_string()))
    }
}

/// Pairs each pool group with its source, failing on unknown ids.
fn pools_with_pairs<'a>(pool: &Path, data: &'a DatasetSplit) -> Result<(Vec<Vec<Hypothesis>>, Vec<&'a Pair>)> {
    let groups = load_pool(pool)?;
    let pairs = groups
        .iter()
        .map(|g| {
            data.find(&g[0].source_id)
                .ok_or_else(|| Error::Missing(format!("source {} is not in the dataset", g[0].source_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((groups, pairs))
}

fn save_train_run(dir: &Path, ckpt: &Checkpoint, record: &crate::train::RunRecord) -> Result<()> {
    ckpt.save(&dir.join("checkpoint.bin"))?;
    io::write_json(&dir.join("run.json"), record)?;
    io::write_jsonl(&dir.join("ledger.jsonl"), &record.steps)?;
    io::write_jsonl(&dir.join("epochs.jsonl"), &record.epochs)
}

fn read_two_columns(path: &Path, column_a: &str, column_b: &str) -> Result<(Vec<f64>, Vec<f64>, String, String)> {
    let is_jsonl = path.extension().is_some_and(|e| e == "jsonl");
    if is_jsonl {
        let rows: Vec<ScoredRow> = io::read_jsonl(path)?;
        let mut cols: BTreeMap<(String, usize), (Option<f64>, Option<f64>)> = BTreeMap::new();
        for r in rows {
            let slot = cols.entry((r.source_id.clone(), r.hyp_index)).or_default();
            if r.metric_id == column_a {
                slot.0 = Some(r.value);
            } else if r.metric_id == column_b {
                slot.1 = Some(r.value);
            }
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for ((id, i), (va, vb)) in cols {
            match (va, vb) {
                (Some(x), Some(y)) => {
                    a.push(x);
                    b.push(y);
                }
                (None, None) => {}
                _ => return Err(Error::Missing(format!("{id}#{i} lacks one of {column_a}, {column_b}"))),
            }
        }
        return Ok((a, b, column_a.to_string(), column_b.to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Precondition(format!("{} is empty", path.display())))?;
    let names: Vec<&str> = header.split('\t').collect();
    if names.len() != 2 {
        return Err(Error::Format(format!(
            "expected a two-column header, got {}",
            names.len()
        )));
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split('\t').collect();
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("line {}: '{s}' is not a number", i + 2)))
        };
        if cells.len() != 2 {
            return Err(Error::Format(format!("line {}: expected 2 columns", i + 2)));
        }
        a.push(parse(cells[0])?);
        b.push(parse(cells[1])?);
    }
    Ok((a, b, names[0].to_string(), names[1].to_string()))
}

/// Correlation report of a two-column TSV or a scored JSONL file.
pub fn meta_eval_file(path: &Path, column_a: &str, column_b: &str) -> Result<CorrelationReport> {
    let (a, b, na, nb) = read_two_columns(path, column_a, column_b)?;
    correlation_report(&a, &b, &na, &nb)
}

fn experiment_spec(global: &GlobalArgs, out: PathBuf, names: &[String], seeds: &[u64]) -> Result<ExperimentSpec> {
    let config: SuiteConfig = read_config(global.config.as_deref())?;
    let names = names
        .iter()
        .map(|n| n.parse())
        .collect::<Result<Vec<ExperimentName>>>()?;
    let seeds = match (seeds.is_empty(), global.seed) {
        (false, _) => seeds.to_vec(),
        (true, Some(s)) => vec![s],
        (true, None) => vec![7, 11, 13],
    };
    Ok(ExperimentSpec {
        names,
        seeds,
        config,
        out_dir: out,
    })
}

fn run_suite(spec: &ExperimentSpec, compute: bool) -> Result<()> {
    let out = run_experiment(spec, compute)?;
    for f in &out.files {
        println!("{}", f.display());
    }
    if let Some(f) = out.failures.first() {
        return Err(Error::Precondition(format!(
            "{} seed/experiment failure(s); first: seed {} {}: {}: {}",
            out.failures.len(),
            f.seed,
            f.experiment,
            f.code,
            f.detail
        )));
    }
    Ok(())
}

/// Executes a parsed command.
pub fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let out = out_root(g.out.as_deref());
    let cfg_path = g.config.as_deref();
    match &cli.command {
        Command::GenData => {
            let mut cfg: DataConfig = read_config(cfg_path)?;
            if let Some(s) = g.seed {
                cfg.task.seed = s;
            }
            let seed = cfg.task.seed;
            let data = cfg.generate(seed)?;
            data.save(&out.join("data"))?;
            println!("{}", out.join("data").display());
        }
        Command::Pretrain { data } => {
            check_exists(data)?;
            let mut cfg: TrainConfig = match cfg_path {
                Some(p) => io::read_json(p)?,
                None => SuiteConfig::default().pretrain,
            };
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            let data = DatasetSplit::load(data)?;
            let (ckpt, record) = pretrain_mle(&cfg, &data)?;
            eprintln!("pretrained in {:.1}s", record.wall_clock_secs);
            let dir = out.join("base");
            save_train_run(&dir, &ckpt, &record)?;
            println!("{}", dir.display());
        }
        Command::Sample {
            checkpoint,
            data,
            split,
        } => {
            let mut cfg: SampleConfig = read_config(cfg_path)?;
            if let Some(s) = g.seed {
                cfg.sampler.seed = s;
            }
            cfg.sampler.validate()?;
            let ckpt = load_checkpoint(checkpoint)?;
            let data = DatasetSplit::load(data)?;
            let groups = split
                .pick(&data)
                .par_iter()
                .map(|p| sample_group(&ckpt.params, &p.id, &render_prompt(p)?, &cfg.sampler, cfg.k))
                .collect::<Result<Vec<_>>>()?;
            let path = out.join("pool.jsonl");
            save_pool(&path, &groups, &cfg.sampler)?;
            println!("{}", path.display());
        }
        Command::Score { pool, data } => {
            let mut cfg: ScoreConfig = read_config(cfg_path)?;
            if let Some(s) = g.seed {
                for o in &mut cfg.oracles {
                    if let OracleConfig::NoisyWrapper { seed, .. } = o {
                        *seed = s;
                    }
                }
            }
            for o in &cfg.oracles {
                o.validate()?;
            }
            let data = DatasetSplit::load(data)?;
            let (groups, pairs) = pools_with_pairs(pool, &data)?;
            let mut rows = Vec::new();
            for (group, pair) in groups.iter().zip(pairs) {
                for (i, h) in group.iter().enumerate() {
                    rows.push(ScoredRow {
                        source_id: pair.id.clone(),
                        hyp_index: i,
                        metric_id: "avg_logprob".into(),
                        value: h.avg_logprob,
                    });
                }
                for oracle in &cfg.oracles {
                    for (i, v) in score_values(group, pair, oracle)?.into_iter().enumerate() {
                        rows.push(ScoredRow {
                            source_id: pair.id.clone(),
                            hyp_index: i,
                            metric_id: oracle.metric_id(),
                            value: v,
                        });
                    }
                }
            }
            let path = out.join("scores.jsonl");
            io::write_jsonl(&path, &rows)?;
            println!("{}", path.display());
        }
        Command::Train { data, base } => {
            let mut cfg: TrainConfig = read_config(cfg_path)?;
            if let Some(s) = g.seed {
                cfg.seed = s;
                cfg.sampler.seed = s;
            }
            let base = load_checkpoint(base)?;
            let data = DatasetSplit::load(data)?;
            let (ckpt, record) = calibrate(&cfg, &data, &base)?;
            eprintln!("trained in {:.1}s", record.wall_clock_secs);
            let dir = out.join("runs").join(&record.run_id);
            save_train_run(&dir, &ckpt, &record)?;
            println!("{}", dir.display());
        }
        Command::Decode {
            checkpoint,
            data,
            split,
            beam,
        } => {
            if *beam == 0 {
                return Err(Error::InvalidConfig("beam must be >= 1".into()));
            }
            let ckpt = load_checkpoint(checkpoint)?;
            let data = DatasetSplit::load(data)?;
            let max_new = ckpt.params.config.max_seq_len;
            let outputs = split
                .pick(&data)
                .par_iter()
                .map(|p| beam_decode(&ckpt.params, &p.id, &render_prompt(p)?, *beam, max_new))
                .collect::<Result<Vec<_>>>()?;
            let path = out.join("outputs.jsonl");
            io::write_jsonl(&path, &outputs)?;
            println!("{}", path.display());
        }
        Command::Select {
            pool,
            data,
            strategy,
            n,
            rerank,
            eval,
        } => {
            let rerank_m = parse_metric(rerank)?;
            let eval_m = parse_metric(eval)?;
            let data = DatasetSplit::load(data)?;
            let (groups, pairs) = pools_with_pairs(pool, &data)?;
            let mut selected = Vec::new();
            let mut total = 0.0;
            let mut used_n = 0;
            for (group, pair) in groups.into_iter().zip(&pairs) {
                let n = n.unwrap_or(group.len());
                used_n = n;
                let pool = CandidatePool::scored(pair, group, &[rerank_m])?;
                let h = match strategy {
                    Strategy::Bon => best_of_n(&pool, n, rerank_m.as_str())?,
                    Strategy::Mbr => mbr(&pool),
                };
                total += eval_m.score(h.output(), pair);
                selected.push(h.clone());
            }
            if selected.is_empty() {
                return Err(Error::Precondition("pool is empty".into()));
            }
            let summary = SelectSummary {
                strategy: format!("{strategy:?}").to_lowercase(),
                n: used_n,
                rerank: rerank_m.to_string(),
                eval: eval_m.to_string(),
                mean_score: total / selected.len() as f64,
            };
            io::write_jsonl(&out.join("selected.jsonl"), &selected)?;
            io::write_json(&out.join("select_summary.json"), &summary)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::MetaEval {
            input,
            column_a,
            column_b,
        } => {
            check_exists(input)?;
            let report = meta_eval_file(input, column_a, column_b)?;
            io::write_json(&out.join("meta_eval.json"), &report)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Experiment { name, seeds } => {
            let spec = experiment_spec(g, out, name, seeds)?;
            run_suite(&spec, true)?;
        }
        Command::Report { name, seeds } => {
            let spec = experiment_spec(g, out, name, seeds)?;
            run_suite(&spec, false)?;
        }
    }
    Ok(())
}

/// Parses `argv` (program name first), runs it, and returns the exit
/// status: 0 on success, 1 on a validation or runtime error, 2 on usage
/// errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(t) = cli.global.threads {
        if t == 0 {
            eprintln!("E_INVALID_CONFIG: --threads must be >= 1");
            return 1;
        }
        // A global pool can only be built once per process; later calls
        // keep the first setting.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}: {}", e.code(), e.to_string().replace('\n', " "));
            1
        }
    }
}
