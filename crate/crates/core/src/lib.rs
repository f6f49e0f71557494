//! Core library for a desk-scale in-context-learning laboratory.
//!
//! The crate generates synthetic Gaussian-mixture classification episodes
//! (unimodal or multimodal), trains a small decoder-only transformer on them
//! with a hand-written backward pass, evaluates in-weights vs. in-context
//! behaviour, measures induction-circuit formation from attention traces,
//! and runs cross-run statistics over many training runs.
//!
//! Modules mirror the pipeline stages:
//! - [`datagen`]: class banks, label spaces, episode construction.
//! - [`net`]: the decoder, positional encodings, projector/encoder, checkpoints.
//! - [`trainer`]: analytic gradients, SGD, curriculum stages, gradient checking.
//! - [`evalsuite`]: IWL / ICL-Novel / ICL-Swap accuracy and context-label accuracy.
//! - [`circuits`]: attention-trace metrics, head identification, ablations.
//! - [`analysis`]: Pearson, random-forest regression, CKA, complexity threshold.
//! - [`records`]: the per-run result row shared by the trainer and analysis.

pub mod analysis;
pub mod circuits;
pub mod datagen;
pub mod error;
pub mod evalsuite;
pub mod net;
pub mod records;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
