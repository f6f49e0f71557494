//! Named parameter tensors.
//!
//! Every tensor has a canonical name and a fixed visiting order; the order is
//! shared by initialization, SGD updates, checkpoints, and gradient checks,
//! which makes all of them bitwise reproducible.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use rand_distr::StandardNormal;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub w_in: Array2<T>,
    pub w_out: Array2<T>,
    pub g1: Array1<T>,
    pub g2: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams<T> {
    /// d_in x d_model; SiLU applied to the hidden activation.
    pub w1: Array2<T>,
    /// d_model x d_model.
    pub w2: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    /// Feed-forward stack, SiLU after every matrix.
    pub layers: Vec<Array2<T>>,
    /// Classification head used only during encoder pretraining.
    pub head: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub layers: Vec<LayerParams<T>>,
    /// Learned position table, max_t x d_model; present for APE and Hybrid.
    pub ape: Option<Array2<T>>,
    pub g_final: Array1<T>,
    /// d_model x n_labels classifier.
    pub w_cls: Array2<T>,
    pub projector: Option<ProjectorParams<T>>,
    pub encoder: Option<EncoderParams<T>>,
}

impl<T: Scalar> ParamSet<T> {
    /// All-zero tensors shaped for `cfg`; the skeleton for grads and loading.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                wq: Array2::zeros((d, d)),
                wk: Array2::zeros((d, d)),
                wv: Array2::zeros((d, d)),
                wo: Array2::zeros((d, d)),
                w_in: Array2::zeros((d, cfg.d_mlp)),
                w_out: Array2::zeros((cfg.d_mlp, d)),
                g1: Array1::zeros(d),
                g2: Array1::zeros(d),
            })
            .collect();
        let ape = cfg
            .pe_type
            .uses_ape_table()
            .then(|| Array2::zeros((cfg.max_t, d)));
        let projector = cfg.projector_in().map(|d_in| ProjectorParams {
            w1: Array2::zeros((d_in, d)),
            w2: Array2::zeros((d, d)),
        });
        let encoder = cfg.m2.as_ref().and_then(|m| m.encoder.as_ref()).map(|enc| {
            let mut dims = vec![cfg.m2.as_ref().expect("m2 present").d2];
            for _ in 0..enc.n_layers.saturating_sub(1) {
                dims.push(enc.width);
            }
            dims.push(enc.d_out);
            let layers = dims
                .windows(2)
                .map(|w| Array2::zeros((w[0], w[1])))
                .collect();
            EncoderParams { layers, head: Array2::zeros((enc.d_out, enc.n_classes.max(1))) }
        });
        Ok(ParamSet {
            layers,
            ape,
            g_final: Array1::zeros(d),
            w_cls: Array2::zeros((d, cfg.n_labels)),
            projector,
            encoder,
        })
    }

    /// Same shapes, all entries zero. Used for gradient accumulators.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, mut view) in out.visit_mut() {
            view.fill(T::zero());
        }
        out
    }

    /// Visits tensors as (name, view) pairs in canonical order.
    pub fn visit(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.wq"), l.wq.view().into_dyn()));
            out.push((format!("layer{i}.wk"), l.wk.view().into_dyn()));
            out.push((format!("layer{i}.wv"), l.wv.view().into_dyn()));
            out.push((format!("layer{i}.wo"), l.wo.view().into_dyn()));
            out.push((format!("layer{i}.w_in"), l.w_in.view().into_dyn()));
            out.push((format!("layer{i}.w_out"), l.w_out.view().into_dyn()));
            out.push((format!("layer{i}.g1"), l.g1.view().into_dyn()));
            out.push((format!("layer{i}.g2"), l.g2.view().into_dyn()));
        }
        if let Some(ape) = &self.ape {
            out.push(("ape".into(), ape.view().into_dyn()));
        }
        out.push(("final_gain".into(), self.g_final.view().into_dyn()));
        out.push(("classifier".into(), self.w_cls.view().into_dyn()));
        if let Some(p) = &self.projector {
            out.push(("projector.w1".into(), p.w1.view().into_dyn()));
            out.push(("projector.w2".into(), p.w2.view().into_dyn()));
        }
        if let Some(e) = &self.encoder {
            for (i, w) in e.layers.iter().enumerate() {
                out.push((format!("encoder.l{i}"), w.view().into_dyn()));
            }
            out.push(("encoder.head".into(), e.head.view().into_dyn()));
        }
        out
    }

    /// Mutable variant of [`visit`]; identical order.
    pub fn visit_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, T>)> = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.wq"), l.wq.view_mut().into_dyn()));
            out.push((format!("layer{i}.wk"), l.wk.view_mut().into_dyn()));
            out.push((format!("layer{i}.wv"), l.wv.view_mut().into_dyn()));
            out.push((format!("layer{i}.wo"), l.wo.view_mut().into_dyn()));
            out.push((format!("layer{i}.w_in"), l.w_in.view_mut().into_dyn()));
            out.push((format!("layer{i}.w_out"), l.w_out.view_mut().into_dyn()));
            out.push((format!("layer{i}.g1"), l.g1.view_mut().into_dyn()));
            out.push((format!("layer{i}.g2"), l.g2.view_mut().into_dyn()));
        }
        if let Some(ape) = &mut self.ape {
            out.push(("ape".into(), ape.view_mut().into_dyn()));
        }
        out.push(("final_gain".into(), self.g_final.view_mut().into_dyn()));
        out.push(("classifier".into(), self.w_cls.view_mut().into_dyn()));
        if let Some(p) = &mut self.projector {
            out.push(("projector.w1".into(), p.w1.view_mut().into_dyn()));
            out.push(("projector.w2".into(), p.w2.view_mut().into_dyn()));
        }
        if let Some(e) = &mut self.encoder {
            for (i, w) in e.layers.iter_mut().enumerate() {
                out.push((format!("encoder.l{i}"), w.view_mut().into_dyn()));
            }
            out.push(("encoder.head".into(), e.head.view_mut().into_dyn()));
        }
        out
    }

    /// Total parameter count.
    pub fn n_params(&self) -> usize {
        self.visit().iter().map(|(_, v)| v.len()).sum()
    }

    /// Errors on any non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in self.visit() {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::numeric(format!("non-finite values in {name}")));
            }
        }
        Ok(())
    }

    /// Element-wise cast into another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let conv2 = |m: &Array2<T>| m.mapv(|v| U::from_f64c(v.to_f64c()));
        let conv1 = |m: &Array1<T>| m.mapv(|v| U::from_f64c(v.to_f64c()));
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: conv2(&l.wq),
                    wk: conv2(&l.wk),
                    wv: conv2(&l.wv),
                    wo: conv2(&l.wo),
                    w_in: conv2(&l.w_in),
                    w_out: conv2(&l.w_out),
                    g1: conv1(&l.g1),
                    g2: conv1(&l.g2),
                })
                .collect(),
            ape: self.ape.as_ref().map(&conv2),
            g_final: conv1(&self.g_final),
            w_cls: conv2(&self.w_cls),
            projector: self.projector.as_ref().map(|p| ProjectorParams {
                w1: conv2(&p.w1),
                w2: conv2(&p.w2),
            }),
            encoder: self.encoder.as_ref().map(|e| EncoderParams {
                layers: e.layers.iter().map(&conv2).collect(),
                head: conv2(&e.head),
            }),
        }
    }
}

/// Gaussian init with standard deviation 1/sqrt(fan_in) for every projection
/// (fan_in = input rows under the x·W convention) and unit RMSNorm gains.
/// The APE table uses standard deviation 1/sqrt(d_model) so each position row
/// starts with expected squared norm 1, the same scale as the input tokens;
/// a zero table would leave the first attention layer blind to position until
/// gradients grow it, which stalls previous-token head formation. Sampling
/// follows canonical tensor order, coordinates in row-major order, so a seed
/// pins every weight.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<T>> {
    let mut params = ParamSet::<T>::zeros(cfg)?;
    let mut rng = rng::rng_for(seed, tags::INIT);
    for (name, mut view) in params.visit_mut() {
        if view.ndim() == 1 {
            view.fill(T::one()); // RMSNorm gains
            continue;
        }
        let fan_in = if name == "ape" { cfg.d_model } else { view.shape()[0] };
        let std = 1.0 / (fan_in as f64).sqrt();
        for v in view.iter_mut() {
            let g: f64 = rng.sample::<f64, _>(StandardNormal);
            *v = T::from_f64c(g * std);
        }
    }
    Ok(params)
}

/// Fetches a tensor view by canonical name.
pub fn tensor_by_name<'a, T: Scalar>(
    params: &'a ParamSet<T>,
    name: &str,
) -> Option<ArrayViewD<'a, T>> {
    params.visit().into_iter().find(|(n, _)| n == name).map(|(_, v)| v)
}
