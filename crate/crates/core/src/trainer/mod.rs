//! SGD training with a handwritten backward pass.
//!
//! Batches are generated fresh each step (infinite-stream regime), gradients
//! come from [`backward`], and the optimizer is plain SGD with weight decay.
//! Curriculum stages select which tensor groups train; frozen tensors stay
//! bitwise constant across a run.
//!
//! Convergence: the run evaluates every `eval_every` steps and keeps a
//! moving average (window `converge_window`) of per-interval train loss;
//! when the best smoothed loss stops improving by `converge_delta` for
//! `converge_window` consecutive evaluations the run stops. A loss above
//! 10·ln(n_labels) aborts the run as diverged.

mod backward;
mod gradcheck;

pub use gradcheck::{grad_check, grad_check_encoder, GradCheckReport};

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::circuits::{probe_metrics, CircuitMetrics};
use crate::datagen::{DataSpec, Episode, EpisodeSource, EvalMode};
use crate::error::{Error, Result};
use crate::evalsuite::{evaluate_all, EvalConfig, EvalSummary};
use crate::net::forward::{encoder_stack, run_forward};
use crate::net::ops::{argmax_row, cross_entropy_sum};
use crate::net::{ModelConfig, ParamSet};
use crate::rng::{self, tags};
use crate::scalar::Scalar;

use backward::{add_grads, backward_batch, backward_encoder};

/// Which tensor groups a training stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Decoder only, on primary-modality episodes.
    UnimodalPretrain,
    /// Freeze everything but the projector.
    MultimodalProjectorOnly,
    /// Projector plus decoder (the default second stage).
    MultimodalProjectorDecoder,
    /// Projector, decoder, and encoder body.
    MultimodalAll,
    /// Same tensor set as MultimodalAll but intended for scratch inits.
    EarlyFusion,
    /// Encoder body and classification head, on single-item batches.
    EncoderPretrain,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::UnimodalPretrain => "unimodal_pretrain",
            Stage::MultimodalProjectorOnly => "multimodal_projector_only",
            Stage::MultimodalProjectorDecoder => "multimodal_projector_decoder",
            Stage::MultimodalAll => "multimodal_all",
            Stage::EarlyFusion => "early_fusion",
            Stage::EncoderPretrain => "encoder_pretrain",
        }
    }
}

/// Freeze mask resolved from a stage. The decoder group covers the
/// transformer layers, position table, final gain, and classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub decoder: bool,
    pub projector: bool,
    pub encoder_body: bool,
    pub encoder_head: bool,
}

impl Trainable {
    pub fn for_stage(stage: Stage) -> Self {
        let (decoder, projector, encoder_body, encoder_head) = match stage {
            Stage::UnimodalPretrain => (true, false, false, false),
            Stage::MultimodalProjectorOnly => (false, true, false, false),
            Stage::MultimodalProjectorDecoder => (true, true, false, false),
            Stage::MultimodalAll | Stage::EarlyFusion => (true, true, true, false),
            Stage::EncoderPretrain => (false, false, true, true),
        };
        Trainable { decoder, projector, encoder_body, encoder_head }
    }

    /// Whether the named tensor updates under this mask.
    pub fn tensor(&self, name: &str) -> bool {
        if name.starts_with("projector.") {
            self.projector
        } else if name == "encoder.head" {
            self.encoder_head
        } else if name.starts_with("encoder.") {
            self.encoder_body
        } else {
            self.decoder
        }
    }
}

/// Optimizer and stopping hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub converge_window: usize,
    pub converge_delta: f64,
    pub stage: Stage,
    /// Run the whole pipeline in f64 (gradient checking); f32 otherwise.
    pub f64_mode: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-6,
            batch_size: 128,
            max_steps: 200_000,
            eval_every: 1000,
            converge_window: 10,
            converge_delta: 1e-4,
            stage: Stage::UnimodalPretrain,
            f64_mode: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::config("lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.eval_every == 0 || self.converge_window == 0 {
            return Err(Error::config("eval_every and converge_window must be >= 1"));
        }
        Ok(())
    }
}

/// How a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxSteps,
    Diverged,
}

impl RunStatus {
    pub fn name(self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::MaxSteps => "max_steps",
            RunStatus::Diverged => "diverged",
        }
    }
}

/// Mid-run accuracy and circuit snapshot attached to an eval point.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MidMetrics {
    pub iwl: f64,
    pub icl_novel: f64,
    pub icl_swap: f64,
    pub icl: f64,
    /// Layer-1 previous-token strength (max over heads).
    pub ph1: f64,
    /// Layer-2 induction strength (max over heads).
    pub ind: f64,
    /// Layer-2 target-label attention (max over heads).
    pub tla: f64,
}

/// One history entry per evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Mean train loss over the interval since the previous evaluation.
    pub train_loss: f64,
    /// Absent for encoder pretraining, which has no episode protocol.
    pub metrics: Option<MidMetrics>,
}

/// Everything a finished run reports.
#[derive(Debug)]
pub struct TrainOutcome<T> {
    pub params: ParamSet<T>,
    pub status: RunStatus,
    pub steps: usize,
    pub history: Vec<EvalPoint>,
    /// Final-protocol accuracies; absent for diverged and encoder runs.
    pub evals: Option<EvalSummary>,
    /// Final circuit probe; absent for diverged and encoder runs.
    pub circuits: Option<CircuitMetrics>,
    /// Held-out top-1 accuracy of the encoder head (encoder runs only).
    pub encoder_acc: Option<f64>,
    pub final_train_loss: f64,
    pub wall_secs: f64,
}

/// Episodes per forward/backward chunk. Fixed so gradient reduction order
/// (and therefore every trained weight) is independent of batch size split.
const GRAD_CHUNK: usize = 16;

/// Mid-run evaluation episode count per protocol is taken from
/// `EvalConfig::mid_episodes`; the circuit probe uses this many episodes.
const MID_PROBE: usize = 64;

/// Mean cross-entropy over a batch plus gradients for the stage's trainable
/// tensors. Episodes are processed in fixed-size chunks and reduced in
/// order, so the result does not depend on chunking internals.
pub fn loss_and_grads<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    episodes: &[&Episode],
    trainable: &Trainable,
) -> Result<(f64, ParamSet<T>)> {
    if episodes.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let n = episodes.len();
    let inv_n = T::from_f64c(1.0 / n as f64);
    let mut grads = params.zeros_like();
    let mut loss_sum = 0.0f64;
    for chunk in episodes.chunks(GRAD_CHUNK) {
        let (logits, cache, _) = run_forward(params, cfg, chunk, &[], false)?;
        let targets: Vec<usize> = chunk.iter().map(|e| e.target_label).collect();
        let (chunk_loss, mut dlogits) = cross_entropy_sum(&logits, &targets);
        loss_sum += chunk_loss;
        dlogits.mapv_inplace(|v| v * inv_n);
        let delta = backward_batch(params, cfg, &cache, &dlogits, trainable);
        add_grads(&mut grads, &delta);
    }
    let loss = loss_sum / n as f64;
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite training loss"));
    }
    Ok((loss, grads))
}

/// Encoder-pretraining objective: classify single secondary items from the
/// encoder features. Returns mean loss and gradients.
pub fn encoder_loss_and_grads<T: Scalar>(
    params: &ParamSet<T>,
    items: &Array2<T>,
    targets: &[usize],
    trainable: &Trainable,
) -> Result<(f64, ParamSet<T>)> {
    let enc = params
        .encoder
        .as_ref()
        .ok_or_else(|| Error::config("encoder pretraining needs an encoder"))?;
    if items.nrows() == 0 || items.nrows() != targets.len() {
        return Err(Error::config("encoder batch shape mismatch"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= enc.head.ncols()) {
        return Err(Error::index(format!(
            "encoder target {t} outside head width {}",
            enc.head.ncols()
        )));
    }
    let (enc_pre, enc_act) = encoder_stack(enc, items);
    let feats = enc_act.last().expect("encoder has layers");
    let logits = feats.dot(&enc.head);
    let (loss_sum, mut dlogits) = cross_entropy_sum(&logits, targets);
    let loss = loss_sum / items.nrows() as f64;
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite encoder loss"));
    }
    dlogits.mapv_inplace(|v| v * T::from_f64c(1.0 / items.nrows() as f64));
    let grads = backward_encoder(params, &enc_pre, &enc_act, items, &dlogits, trainable);
    Ok((loss, grads))
}

/// One SGD step: p <- p - lr (g + wd p) on trainable tensors. Frozen tensors
/// are untouched; lr = 0 leaves all parameters bitwise unchanged.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    lr: f64,
    weight_decay: f64,
    trainable: &Trainable,
) {
    if lr == 0.0 {
        return;
    }
    let lr_t = T::from_f64c(lr);
    let wd_t = T::from_f64c(weight_decay);
    let gviews = grads.visit();
    for ((name, mut p), (gname, g)) in params.visit_mut().into_iter().zip(gviews) {
        debug_assert_eq!(name, gname);
        if !trainable.tensor(&name) {
            continue;
        }
        p.zip_mut_with(&g, |pv, &gv| *pv = *pv - lr_t * (gv + wd_t * *pv));
    }
}

/// Inputs to a training run. The caller supplies initial parameters, which
/// for curriculum stages carry the pretrained tensors.
pub struct TrainSetup<'a> {
    pub model: &'a ModelConfig,
    pub data: &'a DataSpec,
    pub train: &'a TrainConfig,
    pub eval: &'a EvalConfig,
    pub seed: u64,
}

/// Runs SGD until convergence, the step cap, or divergence. Deterministic:
/// the same (initial params, setup) pair reproduces every weight bitwise.
pub fn train<T: Scalar>(init: ParamSet<T>, setup: &TrainSetup) -> Result<TrainOutcome<T>> {
    setup.train.validate()?;
    let source = EpisodeSource::new(setup.data, setup.seed)?;
    if setup.train.stage == Stage::EncoderPretrain {
        return train_encoder(init, setup, &source);
    }
    train_episodes(init, setup, &source)
}

fn train_episodes<T: Scalar>(
    mut params: ParamSet<T>,
    setup: &TrainSetup,
    source: &EpisodeSource,
) -> Result<TrainOutcome<T>> {
    let started = Instant::now();
    let cfg = setup.model;
    let tc = setup.train;
    let trainable = Trainable::for_stage(tc.stage);
    let diverge_at = 10.0 * (cfg.n_labels as f64).ln();

    let mut data_rng = rng::rng_for(setup.seed, tags::TRAIN_STREAM);
    let mut history: Vec<EvalPoint> = Vec::new();
    let mut interval_sum = 0.0f64;
    let mut interval_count = 0usize;
    let mut interval_means: Vec<f64> = Vec::new();
    let mut best_smoothed = f64::INFINITY;
    let mut stall = 0usize;
    let mut status = RunStatus::MaxSteps;
    let mut last_loss = f64::NAN;
    let mut steps_done = 0usize;

    'outer: for step in 1..=tc.max_steps {
        let episodes: Vec<Episode> = (0..tc.batch_size)
            .map(|_| source.episode(EvalMode::Train, &mut data_rng))
            .collect::<Result<_>>()?;
        let refs: Vec<&Episode> = episodes.iter().collect();
        let (loss, grads) = match loss_and_grads(&params, cfg, &refs, &trainable) {
            Ok(ok) => ok,
            Err(Error::Numeric(_)) => {
                status = RunStatus::Diverged;
                steps_done = step;
                break 'outer;
            }
            Err(e) => return Err(e),
        };
        if loss > diverge_at {
            status = RunStatus::Diverged;
            steps_done = step;
            break 'outer;
        }
        sgd_step(&mut params, &grads, tc.lr, tc.weight_decay, &trainable);
        last_loss = loss;
        interval_sum += loss;
        interval_count += 1;
        steps_done = step;

        if step % tc.eval_every == 0 {
            let interval_mean = interval_sum / interval_count as f64;
            interval_sum = 0.0;
            interval_count = 0;
            interval_means.push(interval_mean);

            let metrics = mid_metrics(&params, cfg, source, setup)?;
            history.push(EvalPoint { step, train_loss: interval_mean, metrics: Some(metrics) });

            let w = tc.converge_window.min(interval_means.len());
            let smoothed =
                interval_means[interval_means.len() - w..].iter().sum::<f64>() / w as f64;
            if smoothed < best_smoothed - tc.converge_delta {
                best_smoothed = smoothed;
                stall = 0;
            } else {
                stall += 1;
                if stall >= tc.converge_window {
                    status = RunStatus::Converged;
                    break 'outer;
                }
            }
        }
    }

    let (evals, circuits) = if status == RunStatus::Diverged {
        (None, None)
    } else {
        let summary =
            evaluate_all(&params, cfg, source, setup.eval.n_episodes, setup.seed)?;
        let probe = probe_metrics(&params, cfg, source, setup.eval.n_probe, setup.seed)?;
        (Some(summary), Some(probe))
    };

    Ok(TrainOutcome {
        params,
        status,
        steps: steps_done,
        history,
        evals,
        circuits,
        encoder_acc: None,
        final_train_loss: last_loss,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

fn mid_metrics<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    source: &EpisodeSource,
    setup: &TrainSetup,
) -> Result<MidMetrics> {
    let n = setup.eval.mid_episodes;
    let s = crate::evalsuite::evaluate_all(params, cfg, source, n, setup.seed)?;
    let probe = probe_metrics(params, cfg, source, MID_PROBE, setup.seed)?;
    let last = probe.layers.len() - 1;
    Ok(MidMetrics {
        iwl: s.iwl,
        icl_novel: s.icl_novel,
        icl_swap: s.icl_swap,
        icl: s.icl,
        ph1: probe.layers[0].ph1_max,
        ind: probe.layers[last].ind_max,
        tla: probe.layers[last].tla_max,
    })
}

fn train_encoder<T: Scalar>(
    mut params: ParamSet<T>,
    setup: &TrainSetup,
    source: &EpisodeSource,
) -> Result<TrainOutcome<T>> {
    let started = Instant::now();
    let tc = setup.train;
    let trainable = Trainable::for_stage(tc.stage);
    let n_classes = params
        .encoder
        .as_ref()
        .ok_or_else(|| Error::config("encoder pretraining needs an encoder"))?
        .head
        .ncols();
    let diverge_at = 10.0 * (n_classes as f64).ln();

    let mut data_rng = rng::rng_for(setup.seed, tags::ENCODER_STREAM);
    let mut history = Vec::new();
    let mut interval_sum = 0.0f64;
    let mut interval_count = 0usize;
    let mut interval_means: Vec<f64> = Vec::new();
    let mut best_smoothed = f64::INFINITY;
    let mut stall = 0usize;
    let mut status = RunStatus::MaxSteps;
    let mut last_loss = f64::NAN;
    let mut steps_done = 0usize;

    'outer: for step in 1..=tc.max_steps {
        let (items, targets) = encoder_batch::<T>(source, tc.batch_size, &mut data_rng)?;
        let (loss, grads) =
            match encoder_loss_and_grads(&params, &items, &targets, &trainable) {
                Ok(ok) => ok,
                Err(Error::Numeric(_)) => {
                    status = RunStatus::Diverged;
                    steps_done = step;
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
        if loss > diverge_at {
            status = RunStatus::Diverged;
            steps_done = step;
            break 'outer;
        }
        sgd_step(&mut params, &grads, tc.lr, tc.weight_decay, &trainable);
        last_loss = loss;
        interval_sum += loss;
        interval_count += 1;
        steps_done = step;

        if step % tc.eval_every == 0 {
            let interval_mean = interval_sum / interval_count as f64;
            interval_sum = 0.0;
            interval_count = 0;
            interval_means.push(interval_mean);
            history.push(EvalPoint { step, train_loss: interval_mean, metrics: None });

            let w = tc.converge_window.min(interval_means.len());
            let smoothed =
                interval_means[interval_means.len() - w..].iter().sum::<f64>() / w as f64;
            if smoothed < best_smoothed - tc.converge_delta {
                best_smoothed = smoothed;
                stall = 0;
            } else {
                stall += 1;
                if stall >= tc.converge_window {
                    status = RunStatus::Converged;
                    break 'outer;
                }
            }
        }
    }

    let encoder_acc = if status == RunStatus::Diverged {
        None
    } else {
        let mut eval_rng = rng::rng_for(setup.seed, tags::EVAL_BASE + 0x0f);
        let (items, targets) =
            encoder_batch::<T>(source, setup.eval.n_episodes, &mut eval_rng)?;
        let enc = params.encoder.as_ref().expect("encoder params");
        let (_, act) = encoder_stack(enc, &items);
        let logits = act.last().expect("layers").dot(&enc.head);
        let hits = logits
            .outer_iter()
            .zip(&targets)
            .filter(|(row, &t)| argmax_row(row.as_slice().expect("contiguous")) == t)
            .count();
        Some(hits as f64 / targets.len() as f64)
    };

    Ok(TrainOutcome {
        params,
        status,
        steps: steps_done,
        history,
        evals: None,
        circuits: None,
        encoder_acc,
        final_train_loss: last_loss,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

fn encoder_batch<T: Scalar>(
    source: &EpisodeSource,
    n: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Array2<T>, Vec<usize>)> {
    let mut targets = Vec::with_capacity(n);
    let mut rows: Option<Array2<T>> = None;
    for i in 0..n {
        let (class, item) = source.m2_classification_sample(rng)?;
        let arr = rows.get_or_insert_with(|| Array2::zeros((n, item.len())));
        for (j, &v) in item.iter().enumerate() {
            arr[(i, j)] = T::from_f64c(v as f64);
        }
        targets.push(class);
    }
    Ok((rows.expect("n >= 1"), targets))
}
