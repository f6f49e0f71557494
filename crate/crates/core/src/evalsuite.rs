//! Accuracy measurement under the evaluation protocols.
//!
//! IWL episodes test memorized class-label associations (the query's class
//! never appears in the context); ICL-Novel and ICL-Swap test context-driven
//! prediction; their mean is the reported ICL accuracy. Context-label
//! accuracy (CLA) is the probability that the predicted label appears among
//! the context's displayed labels, a leading indicator of context use.

use serde::{Deserialize, Serialize};

use crate::datagen::{Episode, EpisodeSource, EvalMode};
use crate::error::{Error, Result};
use crate::net::ops::argmax_row;
use crate::net::{forward_batch, ModelConfig, ParamSet};
use crate::rng::{self, tags};
use crate::scalar::Scalar;

/// Episode counts for evaluation and probing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Episodes per mode for final reports.
    pub n_episodes: usize,
    /// Episodes per mode for mid-training history points.
    pub mid_episodes: usize,
    /// Episodes for circuit probes.
    pub n_probe: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_episodes: 2048, mid_episodes: 256, n_probe: 512 }
    }
}

/// Accuracy report for one mode.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub n_episodes: usize,
    /// Fraction of episodes whose argmax prediction equals the target label.
    pub accuracy: f64,
    /// Fraction of episodes whose prediction appears among context labels.
    pub cla: f64,
}

/// Chunk size for evaluation forward passes.
const EVAL_CHUNK: usize = 64;

/// Draws the episode sequence that [`evaluate`] scores for `mode`: the
/// stream is a pure function of (`seed`, mode), so callers that need the
/// raw episodes (ablations, custom forwards) see exactly the same set.
pub fn eval_episodes(
    source: &EpisodeSource,
    mode: EvalMode,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    if mode == EvalMode::Train {
        return Err(Error::config("Train is not an evaluation mode"));
    }
    if n_episodes == 0 {
        return Err(Error::config("n_episodes must be >= 1"));
    }
    let mut rng = rng::rng_for(seed, tags::EVAL_BASE + mode_tag(mode));
    (0..n_episodes).map(|_| source.episode(mode, &mut rng)).collect()
}

/// Top-1 accuracy and context-label accuracy of precomputed logits.
pub fn batch_accuracy<T: Scalar>(
    logits: &ndarray::Array2<T>,
    episodes: &[&Episode],
) -> Result<(f64, f64)> {
    if logits.nrows() != episodes.len() || episodes.is_empty() {
        return Err(Error::config("logit/episode row counts differ or empty"));
    }
    let mut correct = 0usize;
    let mut in_context = 0usize;
    for (e, ep) in episodes.iter().enumerate() {
        let pred = argmax_row(logits.row(e).as_slice().expect("contiguous"));
        if pred == ep.target_label {
            correct += 1;
        }
        if ep.label_ids.contains(&pred) {
            in_context += 1;
        }
    }
    Ok((
        correct as f64 / episodes.len() as f64,
        in_context as f64 / episodes.len() as f64,
    ))
}

/// Evaluates accuracy under `mode`. Episodes are generated from a seed
/// derived from (`seed`, mode), so a report is reproducible in isolation.
/// `Train` is a training-distribution tag, not an evaluation protocol.
pub fn evaluate<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    source: &EpisodeSource,
    mode: EvalMode,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if mode == EvalMode::Train {
        return Err(Error::config("Train is not an evaluation mode"));
    }
    if n_episodes == 0 {
        return Err(Error::config("n_episodes must be >= 1"));
    }
    let mut rng = rng::rng_for(seed, tags::EVAL_BASE + mode_tag(mode));
    let mut correct = 0usize;
    let mut in_context = 0usize;
    let mut remaining = n_episodes;
    while remaining > 0 {
        let take = remaining.min(EVAL_CHUNK);
        let episodes: Vec<Episode> = (0..take)
            .map(|_| source.episode(mode, &mut rng))
            .collect::<Result<_>>()?;
        let refs: Vec<&Episode> = episodes.iter().collect();
        let (logits, _) = forward_batch(params, cfg, &refs, false)?;
        for (e, ep) in episodes.iter().enumerate() {
            let row = logits.row(e);
            let pred = argmax_row(row.as_slice().expect("contiguous"));
            if pred == ep.target_label {
                correct += 1;
            }
            if ep.label_ids.contains(&pred) {
                in_context += 1;
            }
        }
        remaining -= take;
    }
    Ok(EvalReport {
        mode,
        n_episodes,
        accuracy: correct as f64 / n_episodes as f64,
        cla: in_context as f64 / n_episodes as f64,
    })
}

/// Fraction of episodes whose prediction lies among their context labels.
pub fn context_label_accuracy<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    episodes: &[&Episode],
) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::config("empty episode set"));
    }
    let mut hits = 0usize;
    for chunk in episodes.chunks(EVAL_CHUNK) {
        let (logits, _) = forward_batch(params, cfg, chunk, false)?;
        for (e, ep) in chunk.iter().enumerate() {
            let pred = argmax_row(logits.row(e).as_slice().expect("contiguous"));
            if ep.label_ids.contains(&pred) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / episodes.len() as f64)
}

fn mode_tag(mode: EvalMode) -> u64 {
    match mode {
        EvalMode::Train => 0,
        EvalMode::Iwl => 1,
        EvalMode::IclNovel => 2,
        EvalMode::IclSwap => 3,
    }
}

/// The three eval protocols plus derived aggregates, as recorded per run.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalSummary {
    pub iwl: f64,
    pub icl_novel: f64,
    pub icl_swap: f64,
    /// Mean of ICL-Novel and ICL-Swap.
    pub icl: f64,
    /// CLA measured on the ICL-Novel set.
    pub cla: f64,
}

/// Runs all three protocols with per-mode derived seeds.
pub fn evaluate_all<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    source: &EpisodeSource,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    let iwl = evaluate(params, cfg, source, EvalMode::Iwl, n_episodes, seed)?;
    let novel = evaluate(params, cfg, source, EvalMode::IclNovel, n_episodes, seed)?;
    let swap = evaluate(params, cfg, source, EvalMode::IclSwap, n_episodes, seed)?;
    Ok(EvalSummary {
        iwl: iwl.accuracy,
        icl_novel: novel.accuracy,
        icl_swap: swap.accuracy,
        icl: 0.5 * (novel.accuracy + swap.accuracy),
        cla: novel.cla,
    })
}
