//! Weakly-supervised multi-modal out-of-distribution detection.
//!
//! A hinge-margin contrastive module aligns paired image/text embeddings while
//! a sparsity-gated binary classifier learns from a small labeled OOD budget.
//! Their outputs are fused into one OOD score `1 - p_bc * p_cl`, calibrated so
//! that a target fraction of in-distribution pairs stays above the threshold.
//!
//! Module map:
//! - [`similarity`]: vectors, cosine similarity, batch similarity matrices
//! - [`losses`]: hinge, contrastive, gated BCE and joint objectives with gradients
//! - [`model`]: toy encoders, feature gates, classifier head, forward/backward
//! - [`scenarios`]: paired datasets, the three OOD scenario generators, batching
//! - [`detect`]: unified score, threshold calibration, metrics, histograms
//! - [`harness`]: configuration, training loop, checkpoints, evaluation, sweeps

pub mod detect;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod par;
pub mod scenarios;
pub mod similarity;

pub use error::{Error, Result};
