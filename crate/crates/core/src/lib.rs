//! Likelihood-quality calibration for a tiny autoregressive translation model.
//!
//! The crate trains a small decoder-only transformer on a synthetic
//! reversal-and-substitution translation task, then calibrates it by
//! minimizing the negative Pearson correlation between hypothesis
//! log-likelihoods and oracle quality scores within groups of sampled
//! hypotheses. Around that core sit the decoding strategies (sampling, beam
//! search), quality oracles, test-time selection (Best-of-N, MBR), and the
//! correlation statistics used for meta-evaluation.
//!
//! Module map:
//!
//! | module        | contents                                                 |
//! |---------------|----------------------------------------------------------|
//! | [`corpus`]    | synthetic task, dataset splits, prompt rendering         |
//! | [`model`]     | transformer forward pass, log-likelihoods, gradients     |
//! | [`decode`]    | greedy, nucleus/top-k sampling, beam search              |
//! | [`quality`]   | reference-based and reference-free quality oracles       |
//! | [`losses`]    | Pearson calibration loss, SFT and CPO-like baselines     |
//! | [`train`]     | MLE pretraining, calibration loops, Adam                 |
//! | [`select`]    | Best-of-N, MBR, cross-metric evaluation                  |
//! | [`metastats`] | Pearson, Spearman, Kendall tau-b, likelihood-as-QE       |
//! | [`harness`]   | CLI plumbing, experiments, run manifests                 |

pub mod corpus;
pub mod decode;
pub mod error;
pub mod harness;
pub mod io;
pub mod losses;
pub mod metastats;
pub mod model;
pub mod quality;
pub mod rng;
pub mod select;
pub mod train;

pub use error::{Error, Result};
