//! MLE pretraining, group construction and sequence-level fine-tuning.
//!
//! One optimizer step consumes `batch_size * grad_accum` items (pairs for
//! MLE, groups otherwise). Per-item gradients are computed in parallel and
//! summed in item order, so results do not depend on the thread count and
//! `(B, G)` gives the same trajectory as `(B * G, 1)`.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{render_prompt, DatasetSplit, Pair, TargetNoise};
use crate::decode::{beam_decode, sample_group, SamplerConfig};
use crate::error::{Error, Result};
use crate::losses::{group_loss, LossOptions, LossValue, Objective, ScoredGroup, ZMode};
use crate::model::{params_hash, Checkpoint, Gradients, ModelConfig, Parameters, Provenance};
use crate::quality::{score_values, MetricId, OracleConfig};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    #[default]
    Off,
    On,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub policy: Policy,
    pub k: usize,
    pub sampler: SamplerConfig,
    /// Training signal for groups and the validation score.
    pub oracle: OracleConfig,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub sft_weight: f64,
    pub z_mode: ZMode,
    pub cpo_beta: f64,
    /// On-policy resampling period in optimizer steps; `None` never resamples.
    pub resample_every: Option<usize>,
    /// Number of leading training pairs used as calibration sources.
    pub n_sources: usize,
    pub beam_size: usize,
    /// Model shape for pretraining; ignored when starting from a checkpoint.
    pub model: ModelConfig,
    /// Corruption of pretraining targets; unused by the group objectives.
    pub noise: TargetNoise,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Calibration,
            policy: Policy::Off,
            k: 16,
            sampler: SamplerConfig::off_policy(14, 0),
            oracle: OracleConfig::RefFreeRule,
            batch_size: 8,
            grad_accum: 2,
            epochs: 3,
            learning_rate: 3e-4,
            adam: AdamConfig::default(),
            seed: 7,
            sft_weight: 1.0,
            z_mode: ZMode::Sum,
            cpo_beta: 0.1,
            resample_every: None,
            n_sources: 256,
            beam_size: 5,
            model: ModelConfig::default(),
            noise: TargetNoise::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for base-model pretraining.
    pub fn pretrain() -> Self {
        Self {
            objective: Objective::Mle,
            oracle: OracleConfig::RefBasedF,
            batch_size: 16,
            grad_accum: 1,
            epochs: 3,
            learning_rate: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if self.grad_accum < 1 || self.batch_size < 1 {
            return bad("batch_size and grad_accum must be >= 1");
        }
        if matches!(self.objective, Objective::Calibration | Objective::CpoLike) && self.k < 2 {
            return bad("k must be >= 2 for calibration and cpo_like");
        }
        if self.objective != Objective::Mle && self.k < 1 {
            return bad("k must be >= 1");
        }
        if self.sft_weight < 0.0 || !self.sft_weight.is_finite() {
            return bad("sft_weight must be >= 0");
        }
        if self.beam_size < 1 {
            return bad("beam_size must be >= 1");
        }
        if self.resample_every == Some(0) {
            return bad("resample_every must be >= 1");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps > 0");
        }
        self.sampler.validate()?;
        self.oracle.validate()?;
        self.noise.validate()?;
        self.model.validate()
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            sft_weight: self.sft_weight,
            z_mode: self.z_mode,
            cpo_beta: self.cpo_beta,
        }
    }

    /// Short stable hash of the serialized config.
    pub fn run_id(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        format!("{}-{}", self.objective.as_str(), hex::encode(&digest[..6]))
    }
}

/// Adam with bias correction and a constant learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Parameters, grad: &Gradients) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.data.iter_mut().zip(&grad.data).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
        params.round_to_precision();
    }
}

/// One optimizer step in the run ledger. Loss fields are means over the
/// step's items; `skipped_groups` is a count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub pearson: f64,
    pub sft: f64,
    pub preference: f64,
    pub skipped_groups: usize,
    pub items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub step: usize,
    pub validation_score: f64,
    pub params_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: TrainConfig,
    pub steps: Vec<StepRow>,
    pub epochs: Vec<EpochRow>,
    pub selected_epoch: usize,
    pub selected_checkpoint: String,
    /// Kept out of the serialized record so reruns are byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn validation_scores(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.validation_score).collect()
    }

    pub fn best_validation(&self) -> f64 {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.selected_epoch)
            .map(|e| e.validation_score)
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// Mean of a loss component over the steps of one epoch.
    pub fn epoch_mean(&self, epoch: usize, component: &str) -> f64 {
        let rows: Vec<&StepRow> = self.steps.iter().filter(|s| s.epoch == epoch).collect();
        if rows.is_empty() {
            return f64::NAN;
        }
        let sum: f64 = rows
            .iter()
            .map(|r| match component {
                "total" => r.total,
                "pearson" => r.pearson,
                "sft" => r.sft,
                "preference" => r.preference,
                _ => f64::NAN,
            })
            .sum();
        sum / rows.len() as f64
    }
}

/// Mean oracle score of beam decodes over `pairs`.
pub fn beam_score(params: &Parameters, pairs: &[Pair], beam: usize, metric: MetricId) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Precondition("no pairs to evaluate".into()));
    }
    let max_new = params.config.max_seq_len;
    let scores = pairs
        .par_iter()
        .map(|p| {
            let h = beam_decode(params, &p.id, &render_prompt(p)?, beam, max_new)?;
            Ok(metric.score(h.output(), p))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Samples `k` hypotheses per pair from `params` and scores them once.
pub fn sample_scored_groups(
    params: &Parameters,
    pairs: &[Pair],
    k: usize,
    sampler: &SamplerConfig,
    oracle: &OracleConfig,
) -> Result<Vec<ScoredGroup>> {
    sampler.validate()?;
    oracle.validate()?;
    pairs
        .par_iter()
        .map(|p| {
            let hyps = sample_group(params, &p.id, &render_prompt(p)?, sampler, k)?;
            let q = score_values(&hyps, p, oracle)?;
            ScoredGroup::new(hyps, q)
        })
        .collect()
}

/// Mean within-group Pearson correlation of `z` (under `params`) and the
/// frozen `q`, over the non-degenerate groups.
pub fn mean_group_pearson(params: &Parameters, pairs: &[Pair], groups: &[ScoredGroup], z_mode: ZMode) -> Result<f64> {
    check_groups_len(groups, pairs)?;
    let opts = LossOptions {
        z_mode,
        ..LossOptions::default()
    };
    let rs = pairs
        .par_iter()
        .zip(groups)
        .map(|(p, g)| {
            let (v, _) = group_loss(params, p, g, Objective::Calibration, &opts, false)?;
            Ok((v.skipped_groups == 0).then(|| -v.components["pearson"]))
        })
        .collect::<Result<Vec<Option<f64>>>>()?;
    let kept: Vec<f64> = rs.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::Precondition("every group is degenerate".into()));
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

fn check_groups_len(groups: &[ScoredGroup], pairs: &[Pair]) -> Result<()> {
    if groups.len() != pairs.len() {
        return Err(Error::LengthMismatch {
            left: groups.len(),
            right: pairs.len(),
        });
    }
    Ok(())
}

/// Groups for calibration. Off-policy groups come from the frozen
/// `external` model; on-policy groups from `current`. `round` selects the
/// resampling round (round 0 uses the sampler seed unchanged).
#[allow(clippy::too_many_arguments)]
pub fn build_calibration_groups(
    policy: Policy,
    current: &Parameters,
    external: Option<&Parameters>,
    pairs: &[Pair],
    k: usize,
    sampler: &SamplerConfig,
    oracle: &OracleConfig,
    round: u64,
) -> Result<Vec<ScoredGroup>> {
    let (model, cfg) = match policy {
        Policy::Off => {
            let ext = external.ok_or_else(|| Error::Precondition("off-policy groups need an external model".into()))?;
            (ext, sampler.clone())
        }
        Policy::On => {
            let mut cfg = sampler.clone();
            if round > 0 {
                cfg.seed = rng::mix(sampler.seed, round);
            }
            (current, cfg)
        }
    };
    sample_scored_groups(model, pairs, k, &cfg, oracle)
}

fn check_finite(step: usize, loss: f64, params: &Parameters) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("loss is {loss}"),
        });
    }
    if let Some(name) = params.first_non_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("parameter tensor {name} became non-finite"),
        });
    }
    Ok(())
}

/// Items seen in one optimizer step and their summed losses.
struct StepSums {
    total: f64,
    pearson: f64,
    sft: f64,
    preference: f64,
    skipped: usize,
}

fn sum_items(results: Vec<(LossValue, Gradients)>, grad: &mut Gradients, sums: &mut StepSums) {
    for (v, g) in results {
        grad.add_assign(&g);
        sums.total += v.total;
        sums.pearson += v.component("pearson");
        sums.sft += v.component("sft");
        sums.preference += v.component("preference");
        sums.skipped += v.skipped_groups;
    }
}

/// Epoch-shuffled item order.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng(rng::mix(seed, 0x5eed_0000 + epoch as u64)));
    idx
}

/// State shared by the MLE and group training loops.
struct Loop<'a> {
    cfg: &'a TrainConfig,
    params: Parameters,
    adam: Adam,
    record: RunRecord,
    best: Option<(f64, Parameters, usize)>,
    step: usize,
}

impl<'a> Loop<'a> {
    fn new(cfg: &'a TrainConfig, params: Parameters) -> Self {
        let adam = Adam::new(params.n_params(), cfg.learning_rate, cfg.adam);
        Self {
            cfg,
            params,
            adam,
            record: RunRecord {
                run_id: cfg.run_id(),
                config: cfg.clone(),
                steps: Vec::new(),
                epochs: Vec::new(),
                selected_epoch: 0,
                selected_checkpoint: String::new(),
                wall_clock_secs: 0.0,
            },
            best: None,
            step: 0,
        }
    }

    fn apply(&mut self, epoch: usize, mut grad: Gradients, sums: StepSums, items: usize) -> Result<()> {
        let n = items as f64;
        grad.scale(1.0 / n);
        self.adam.step(&mut self.params, &grad);
        let row = StepRow {
            step: self.step,
            epoch,
            total: sums.total / n,
            pearson: sums.pearson / n,
            sft: sums.sft / n,
            preference: sums.preference / n,
            skipped_groups: sums.skipped,
            items,
        };
        check_finite(self.step, row.total, &self.params)?;
        self.record.steps.push(row);
        self.step += 1;
        Ok(())
    }

    fn end_epoch(&mut self, epoch: usize, validation: &[Pair]) -> Result<()> {
        let metric = self.cfg.oracle.base_metric();
        let score = beam_score(&self.params, validation, self.cfg.beam_size, metric)?;
        self.record.epochs.push(EpochRow {
            epoch,
            step: self.step,
            validation_score: score,
            params_hash: params_hash(&self.params),
        });
        if self.best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            self.best = Some((score, self.params.clone(), epoch));
        }
        Ok(())
    }

    fn finish(mut self, started: Instant) -> (Checkpoint, RunRecord) {
        let (score, params, epoch) = self.best.expect("at least one epoch");
        self.record.selected_epoch = epoch;
        self.record.selected_checkpoint = params_hash(&params);
        self.record.wall_clock_secs = started.elapsed().as_secs_f64();
        let step = self
            .record
            .epochs
            .iter()
            .find(|e| e.epoch == epoch)
            .map(|e| e.step)
            .unwrap_or(0);
        let ckpt = Checkpoint::new(
            params,
            Provenance {
                run_id: self.record.run_id.clone(),
                step,
                epoch: Some(epoch),
                validation_score: Some(score),
            },
        );
        (ckpt, self.record)
    }
}

/// Trains a fresh model on (possibly corrupted) reference translations and
/// returns the best-validation checkpoint (ties go to the earliest epoch).
/// Validation always uses the clean references.
pub fn pretrain_mle(cfg: &TrainConfig, data: &DatasetSplit) -> Result<(Checkpoint, RunRecord)> {
    if cfg.objective != Objective::Mle {
        return Err(Error::InvalidConfig("pretraining requires objective mle".into()));
    }
    cfg.validate()?;
    let train: Vec<Pair> = data
        .train
        .iter()
        .map(|p| Pair {
            reference: cfg.noise.target(&data.task, p),
            ..p.clone()
        })
        .collect();
    let validation = &data.validation;
    if train.is_empty() || cfg.epochs == 0 {
        return Err(Error::Precondition(
            "pretraining needs data and at least one epoch".into(),
        ));
    }
    let started = Instant::now();
    let params = Parameters::init(cfg.model.clone(), rng::mix(cfg.seed, 0x1417))?;
    let mut lp = Loop::new(cfg, params);
    let per_step = cfg.batch_size * cfg.grad_accum;
    let opts = cfg.loss_options();
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        for chunk in order.chunks(per_step) {
            let results = chunk
                .par_iter()
                .map(|&i| {
                    let pair = &train[i];
                    let empty = ScoredGroup {
                        source_id: pair.id.clone(),
                        hypotheses: Vec::new(),
                        q: Vec::new(),
                    };
                    let (v, g) = group_loss(&lp.params, pair, &empty, Objective::Mle, &opts, true)?;
                    Ok((v, g.expect("gradient requested")))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grad = lp.params.zeros_like();
            let mut sums = StepSums {
                total: 0.0,
                pearson: 0.0,
                sft: 0.0,
                preference: 0.0,
                skipped: 0,
            };
            sum_items(results, &mut grad, &mut sums);
            lp.apply(epoch, grad, sums, chunk.len())?;
        }
        lp.end_epoch(epoch, validation)?;
    }
    Ok(lp.finish(started))
}

/// Fine-tunes `base` with a group objective. The first `n_sources`
/// training pairs are the calibration sources.
pub fn calibrate(cfg: &TrainConfig, data: &DatasetSplit, base: &Checkpoint) -> Result<(Checkpoint, RunRecord)> {
    calibrate_with_groups(cfg, &data.train, &data.validation, base, None)
}

/// As [`calibrate`], optionally reusing pre-built off-policy groups.
pub fn calibrate_with_groups(
    cfg: &TrainConfig,
    train: &[Pair],
    validation: &[Pair],
    base: &Checkpoint,
    groups: Option<&[ScoredGroup]>,
) -> Result<(Checkpoint, RunRecord)> {
    if cfg.objective == Objective::Mle {
        return Err(Error::InvalidConfig(
            "calibrate needs sft_bon, cpo_like or calibration".into(),
        ));
    }
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Err(Error::Precondition("need at least one epoch".into()));
    }
    let sources = &train[..cfg.n_sources.min(train.len())];
    if sources.is_empty() {
        return Err(Error::Precondition("no calibration sources".into()));
    }
    let started = Instant::now();
    let mut lp = Loop::new(cfg, base.params.clone());
    let mut groups: Vec<ScoredGroup> = match groups {
        Some(g) if cfg.policy == Policy::Off => {
            check_groups(g, sources, cfg.k)?;
            g.to_vec()
        }
        _ => build_calibration_groups(
            cfg.policy,
            &lp.params,
            Some(&base.params),
            sources,
            cfg.k,
            &cfg.sampler,
            &cfg.oracle,
            0,
        )?,
    };
    let per_step = cfg.batch_size * cfg.grad_accum;
    let opts = cfg.loss_options();
    let mut round = 0u64;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(groups.len(), cfg.seed, epoch);
        for chunk in order.chunks(per_step) {
            if cfg.policy == Policy::On {
                if let Some(every) = cfg.resample_every {
                    if lp.step > 0 && lp.step.is_multiple_of(every) {
                        round += 1;
                        groups = build_calibration_groups(
                            Policy::On,
                            &lp.params,
                            None,
                            sources,
                            cfg.k,
                            &cfg.sampler,
                            &cfg.oracle,
                            round,
                        )?;
                    }
                }
            }
            let results = chunk
                .par_iter()
                .map(|&i| {
                    let (v, g) = group_loss(&lp.params, &sources[i], &groups[i], cfg.objective, &opts, true)?;
                    Ok((v, g.expect("gradient requested")))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grad = lp.params.zeros_like();
            let mut sums = StepSums {
                total: 0.0,
                pearson: 0.0,
                sft: 0.0,
                preference: 0.0,
                skipped: 0,
            };
            sum_items(results, &mut grad, &mut sums);
            lp.apply(epoch, grad, sums, chunk.len())?;
        }
        lp.end_epoch(epoch, validation)?;
    }
    Ok(lp.finish(started))
}

fn check_groups(groups: &[ScoredGroup], sources: &[Pair], k: usize) -> Result<()> {
    check_groups_len(groups, sources)?;
    for (g, p) in groups.iter().zip(sources) {
        if g.source_id != p.id || g.hypotheses.len() != k || g.q.len() != k {
            return Err(Error::Precondition(format!(
                "group for {} does not match its source",
                p.id
            )));
        }
    }
    Ok(())
}

/// Runs [`calibrate`] for each learning rate and keeps the best validation
/// score (ties go to the earlier rate).
pub fn calibrate_sweep(
    cfg: &TrainConfig,
    learning_rates: &[f64],
    train: &[Pair],
    validation: &[Pair],
    base: &Checkpoint,
    groups: Option<&[ScoredGroup]>,
) -> Result<(Checkpoint, RunRecord)> {
    let mut best: Option<(Checkpoint, RunRecord)> = None;
    for &lr in learning_rates {
        let c = TrainConfig {
            learning_rate: lr,
            ..cfg.clone()
        };
        let run = calibrate_with_groups(&c, train, validation, base, groups)?;
        if best
            .as_ref()
            .is_none_or(|(_, r)| run.1.best_validation() > r.best_validation())
        {
            best = Some(run);
        }
    }
    best.ok_or_else(|| Error::InvalidConfig("empty learning-rate sweep".into()))
}
