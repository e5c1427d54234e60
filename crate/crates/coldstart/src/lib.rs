//! Desk-scale multi-task learning-to-rank testbed for cost-efficient
//! cold-start remedies.
//!
//! The crate implements a multi-task neural ranker (feature summarization,
//! cross-interaction layers, MMoE task heads) with exact manual backprop, plus
//! three lightweight cold-start techniques that can be toggled independently:
//!
//! - **Residual**: a projected skip connection feeding non-historical features
//!   directly into the prediction stage.
//! - **ScoreReg**: a debiasing loss penalizing the squared distance between
//!   the mean predicted scores of warm and cold instances in a batch.
//! - **Mixup**: training on convex combinations of augmented embeddings and
//!   labels, alongside the original samples.
//!
//! A seeded synthetic data generator plants the pathologies these techniques
//! address (historical-feature shortcut, logged-label suppression on cold
//! items, cold sparsity), and the evaluation kit measures their mechanisms:
//! gradient-norm ratios, feature-ablation deltas, warm/cold score gaps and the
//! PCA effective rank of the embedding space.
//!
//! Module map:
//!
//! - [`numgrad`]: dense-matrix layers with analytic backward passes and a
//!   finite-difference harness.
//! - [`model`]: the ranker, its parameters and exact gradients.
//! - [`objectives`]: BCE, the debias term, mixup, and the combined objective.
//! - [`synthdata`]: dataset generation and the JSONL dataset format.
//! - [`trainer`]: the seeded training loop with per-step diagnostics.
//! - [`evalkit`]: Hits@K, PR-AUC, ablation, score gaps, PCA analysis.
//! - [`experiment`]: subset x seed orchestration and the consolidated report.
//!
//! With the default `parallel` feature, evaluation and the experiment matrix
//! fan out via rayon; `--no-default-features` builds a fully sequential binary
//! with identical outputs.

pub mod error;
pub mod evalkit;
pub mod exec;
pub mod experiment;
pub mod model;
pub mod numgrad;
pub mod objectives;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
