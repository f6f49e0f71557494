//! Central finite-difference verification of the analytic gradients.
//!
//! For each trainable tensor a random subset of coordinates is perturbed by
//! +/- h and the loss difference quotient is compared against the analytic
//! gradient. Everything runs in f64: with h = 1e-5 the difference quotient
//! carries roughly 1e-11 absolute noise, comfortably below the 1e-6
//! relative tolerance the checks assert. Frozen tensors are asserted to
//! have exactly zero analytic gradient and are not perturbed.

use ndarray::Array2;

use super::{encoder_loss_and_grads, loss_and_grads, Stage, Trainable};
use crate::datagen::Episode;
use crate::error::{Error, Result};
use crate::net::ops::cross_entropy_sum;
use crate::net::{forward_batch, ModelConfig, ParamSet};
use crate::rng::{self, tags};

/// Finite-difference step.
const FD_H: f64 = 1e-5;

/// Relative-error denominator floor. Keeps tiny-gradient coordinates from
/// amplifying difference-quotient noise while still catching real defects,
/// which show up orders of magnitude above it.
const DENOM_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub frozen: bool,
}

/// Outcome of a gradient check. `failures` lists tensors whose error
/// exceeded the tolerance (or frozen tensors with nonzero gradients).
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_tensor: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Verifies `loss_and_grads` on an episode batch under `stage`'s freeze
/// mask, sampling at most `coords_per_tensor` coordinates per tensor.
pub fn grad_check(
    params: &ParamSet<f64>,
    cfg: &ModelConfig,
    episodes: &[&Episode],
    stage: Stage,
    tolerance: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let trainable = Trainable::for_stage(stage);
    let (_, grads) = loss_and_grads(params, cfg, episodes, &trainable)?;
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let (logits, _) = forward_batch(p, cfg, episodes, false)?;
        let targets: Vec<usize> = episodes.iter().map(|e| e.target_label).collect();
        let (sum, _) = cross_entropy_sum(&logits, &targets);
        Ok(sum / episodes.len() as f64)
    };
    run_check(params, &grads, &trainable, eval, tolerance, coords_per_tensor, seed)
}

/// Verifies `encoder_loss_and_grads` on a single-item classification batch.
pub fn grad_check_encoder(
    params: &ParamSet<f64>,
    items: &Array2<f64>,
    targets: &[usize],
    tolerance: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let trainable = Trainable::for_stage(Stage::EncoderPretrain);
    let (_, grads) = encoder_loss_and_grads(params, items, targets, &trainable)?;
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let (loss, _) = encoder_loss_and_grads(p, items, targets, &trainable)?;
        Ok(loss)
    };
    run_check(params, &grads, &trainable, eval, tolerance, coords_per_tensor, seed)
}

fn run_check(
    params: &ParamSet<f64>,
    grads: &ParamSet<f64>,
    trainable: &Trainable,
    eval: impl Fn(&ParamSet<f64>) -> Result<f64>,
    tolerance: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if coords_per_tensor == 0 {
        return Err(Error::config("coords_per_tensor must be >= 1"));
    }
    let mut rng = rng::rng_for(seed, tags::GRAD_CHECK);
    let mut work = params.clone();
    let mut per_tensor = Vec::new();
    let mut failures = Vec::new();
    let mut global_max = 0.0f64;

    let gviews = grads.visit();
    for (ti, (name, gview)) in gviews.iter().enumerate() {
        let gslice = gview.as_slice().expect("gradient tensors are contiguous");
        if !trainable.tensor(name) {
            let clean = gslice.iter().all(|&v| v == 0.0);
            if !clean {
                failures.push(format!("{name}: frozen tensor has nonzero gradient"));
            }
            per_tensor.push(TensorCheck {
                name: name.clone(),
                max_rel_err: 0.0,
                coords_checked: 0,
                frozen: true,
            });
            continue;
        }
        let len = gslice.len();
        let k = coords_per_tensor.min(len);
        let picks = rand::seq::index::sample(&mut rng, len, k);
        let mut tensor_max = 0.0f64;
        for flat in picks {
            let analytic = gslice[flat];
            let original = poke(&mut work, ti, flat, None);
            poke(&mut work, ti, flat, Some(original + FD_H));
            let plus = eval(&work)?;
            poke(&mut work, ti, flat, Some(original - FD_H));
            let minus = eval(&work)?;
            poke(&mut work, ti, flat, Some(original));
            let fd = (plus - minus) / (2.0 * FD_H);
            let denom = analytic.abs().max(fd.abs()).max(DENOM_FLOOR);
            let rel = (fd - analytic).abs() / denom;
            tensor_max = tensor_max.max(rel);
        }
        if tensor_max > tolerance {
            failures.push(format!("{name}: max relative error {tensor_max:.3e}"));
        }
        global_max = global_max.max(tensor_max);
        per_tensor.push(TensorCheck {
            name: name.clone(),
            max_rel_err: tensor_max,
            coords_checked: k,
            frozen: false,
        });
    }

    Ok(GradCheckReport {
        per_tensor,
        max_rel_err: global_max,
        tolerance,
        failures,
    })
}

/// Reads (and optionally writes) one flat coordinate of the ti-th tensor in
/// canonical visit order. Returns the value present before any write.
fn poke(params: &mut ParamSet<f64>, ti: usize, flat: usize, set: Option<f64>) -> f64 {
    let mut views = params.visit_mut();
    let slice = views[ti]
        .1
        .as_slice_mut()
        .expect("parameter tensors are contiguous");
    let old = slice[flat];
    if let Some(v) = set {
        slice[flat] = v;
    }
    old
}
