//! Analytic backward pass, mirroring the forward cache layer by layer.
//!
//! The entry point takes d(loss)/d(logits) already scaled for the batch and
//! returns a gradient `ParamSet`. Weight gradients are skipped (left zero)
//! for tensors the stage freezes; activation gradients always flow, since
//! trainable tensors may sit upstream of frozen ones.

use ndarray::{s, Array2};

use super::Trainable;
use crate::net::forward::ForwardCache;
use crate::net::ops::{rmsnorm_rows_backward, silu_backward, softmax_rows_backward};
use crate::net::pe::rope_rotate_rows;
use crate::net::{ModelConfig, ParamSet};
use crate::scalar::Scalar;

/// Backpropagates `dlogits` (E x n_labels) through the cached forward pass.
pub(crate) fn backward_batch<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    cache: &ForwardCache<T>,
    dlogits: &Array2<T>,
    trainable: &Trainable,
) -> ParamSet<T> {
    let mut grads = params.zeros_like();
    let t = cache.t;
    let n_ep = cache.n_ep;
    let rows = n_ep * t;
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = T::from_f64c(1.0 / (dh as f64).sqrt());
    let positions: Vec<usize> = (0..t).collect();

    // Readout: logits = rmsnorm(final_rows) . w_cls.
    if trainable.decoder {
        grads.w_cls = cache.gn.t().dot(dlogits);
    }
    let dgn = dlogits.dot(&params.w_cls.t());
    let (dfinal, dgf) =
        rmsnorm_rows_backward(&cache.x_final_rows, &params.g_final, &cache.invf, &dgn);
    if trainable.decoder {
        grads.g_final = dgf;
    }

    // Scatter query-row gradients into the full stream.
    let mut dx: Array2<T> = Array2::zeros((rows, d));
    for e in 0..n_ep {
        dx.row_mut(e * t + t - 1).assign(&dfinal.row(e));
    }

    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let glayer = &mut grads.layers[li];

        // MLP block: x_out = x_mid + silu(rmsnorm(x_mid) . w_in) . w_out.
        // dx currently holds the gradient at x_out; the residual add sends
        // it unchanged to x_mid and through the MLP branch.
        let dh_act = dx.dot(&layer.w_out.t());
        if trainable.decoder {
            glayer.w_out = cache.h_act[li].t().dot(&dx);
        }
        let dh_pre = silu_backward(&cache.h_pre[li], &dh_act);
        let dxn2 = dh_pre.dot(&layer.w_in.t());
        if trainable.decoder {
            glayer.w_in = cache.xn2[li].t().dot(&dh_pre);
        }
        let (dxm, dg2) =
            rmsnorm_rows_backward(&cache.x_mid[li], &layer.g2, &cache.inv2[li], &dxn2);
        if trainable.decoder {
            glayer.g2 = dg2;
        }
        dx.zip_mut_with(&dxm, |a, &b| *a = *a + b);

        // Attention block: x_mid = x_pre + ctx . wo.
        let dctx = dx.dot(&layer.wo.t());
        if trainable.decoder {
            glayer.wo = cache.ctx[li].t().dot(&dx);
        }

        let q = &cache.q[li];
        let k = &cache.k[li];
        let v = &cache.v[li];
        let mut dq: Array2<T> = Array2::zeros((rows, d));
        let mut dk: Array2<T> = Array2::zeros((rows, d));
        let mut dv: Array2<T> = Array2::zeros((rows, d));
        for e in 0..n_ep {
            let r0 = e * t;
            for h in 0..n_heads {
                let c0 = h * dh;
                let a = &cache.attn[li][e * n_heads + h];
                let dctx_b = dctx.slice(s![r0..r0 + t, c0..c0 + dh]);
                let vb = v.slice(s![r0..r0 + t, c0..c0 + dh]);
                // ctx_b = A . vb.
                let da = dctx_b.dot(&vb.t());
                dv.slice_mut(s![r0..r0 + t, c0..c0 + dh])
                    .assign(&a.t().dot(&dctx_b));
                // Masked entries carry zero attention, so ds vanishes there;
                // knocked-out heads (all-zero A) backpropagate nothing.
                let ds = softmax_rows_backward(a, &da);
                let qb = q.slice(s![r0..r0 + t, c0..c0 + dh]);
                let kb = k.slice(s![r0..r0 + t, c0..c0 + dh]);
                let mut dqb = ds.dot(&kb);
                dqb.mapv_inplace(|x| x * scale);
                let mut dkb = ds.t().dot(&qb);
                dkb.mapv_inplace(|x| x * scale);
                if cfg.pe_type.uses_rope() {
                    // q, k were rotated in place after the projection; the
                    // rotation is orthogonal, so its adjoint is the inverse.
                    rope_rotate_rows(&mut dqb, &positions, cfg.rope_base, true);
                    rope_rotate_rows(&mut dkb, &positions, cfg.rope_base, true);
                }
                dq.slice_mut(s![r0..r0 + t, c0..c0 + dh]).assign(&dqb);
                dk.slice_mut(s![r0..r0 + t, c0..c0 + dh]).assign(&dkb);
            }
        }

        let xn1 = &cache.xn1[li];
        if trainable.decoder {
            glayer.wq = xn1.t().dot(&dq);
            glayer.wk = xn1.t().dot(&dk);
            glayer.wv = xn1.t().dot(&dv);
        }
        let mut dxn1 = dq.dot(&layer.wq.t());
        dxn1.zip_mut_with(&dk.dot(&layer.wk.t()), |a, &b| *a = *a + b);
        dxn1.zip_mut_with(&dv.dot(&layer.wv.t()), |a, &b| *a = *a + b);
        let (dxp, dg1) =
            rmsnorm_rows_backward(&cache.x_pre[li], &layer.g1, &cache.inv1[li], &dxn1);
        if trainable.decoder {
            glayer.g1 = dg1;
        }
        dx.zip_mut_with(&dxp, |a, &b| *a = *a + b);
    }

    // Position table: every row of every episode received ape[t_i].
    if trainable.decoder {
        if let Some(dape) = grads.ape.as_mut() {
            for e in 0..n_ep {
                for ti in 0..t {
                    let src = dx.row(e * t + ti);
                    let mut out = dape.row_mut(ti);
                    for j in 0..d {
                        out[j] = out[j] + src[j];
                    }
                }
            }
        }
    }

    // Secondary-modality pipeline: gather the projected rows' gradients and
    // walk back through projector and encoder.
    if let (Some(proj), Some(proj_pre), Some(proj_act)) =
        (&params.projector, &cache.proj_pre, &cache.proj_act)
    {
        let n_m2 = cache.m2_rows.len();
        let mut dp: Array2<T> = Array2::zeros((n_m2, d));
        for (i, &row) in cache.m2_rows.iter().enumerate() {
            dp.row_mut(i).assign(&dx.row(row));
        }
        let dproj_act = dp.dot(&proj.w2.t());
        let feats: &Array2<T> = cache
            .enc_act
            .last()
            .or(cache.m2_raw.as_ref())
            .expect("multimodal cache has features");
        if trainable.projector {
            let gproj = grads.projector.as_mut().expect("projector grads");
            gproj.w2 = proj_act.t().dot(&dp);
        }
        let dproj_pre = silu_backward(proj_pre, &dproj_act);
        if trainable.projector {
            let gproj = grads.projector.as_mut().expect("projector grads");
            gproj.w1 = feats.t().dot(&dproj_pre);
        }

        if let Some(enc) = &params.encoder {
            let mut dcur = dproj_pre.dot(&proj.w1.t());
            for i in (0..enc.layers.len()).rev() {
                let dpre = silu_backward(&cache.enc_pre[i], &dcur);
                let input: &Array2<T> = if i == 0 {
                    cache.m2_raw.as_ref().expect("raw m2 cached")
                } else {
                    &cache.enc_act[i - 1]
                };
                if trainable.encoder_body {
                    let genc = grads.encoder.as_mut().expect("encoder grads");
                    genc.layers[i] = input.t().dot(&dpre);
                }
                if i > 0 {
                    dcur = dpre.dot(&enc.layers[i].t());
                }
            }
        }
    }

    grads
}

/// Backward pass for the encoder-pretraining objective: a classification
/// head on top of the encoder stack, no decoder involved.
pub(crate) fn backward_encoder<T: Scalar>(
    params: &ParamSet<T>,
    enc_pre: &[Array2<T>],
    enc_act: &[Array2<T>],
    raw: &Array2<T>,
    dlogits: &Array2<T>,
    trainable: &Trainable,
) -> ParamSet<T> {
    let mut grads = params.zeros_like();
    let enc = params.encoder.as_ref().expect("encoder params");
    let feats = enc_act.last().expect("encoder has layers");
    if trainable.encoder_head {
        let genc = grads.encoder.as_mut().expect("encoder grads");
        genc.head = feats.t().dot(dlogits);
    }
    let mut dcur = dlogits.dot(&enc.head.t());
    for i in (0..enc.layers.len()).rev() {
        let dpre = silu_backward(&enc_pre[i], &dcur);
        let input: &Array2<T> = if i == 0 { raw } else { &enc_act[i - 1] };
        if trainable.encoder_body {
            let genc = grads.encoder.as_mut().expect("encoder grads");
            genc.layers[i] = input.t().dot(&dpre);
        }
        if i > 0 {
            dcur = dpre.dot(&enc.layers[i].t());
        }
    }
    grads
}

/// Elementwise gradient accumulation; shapes must match.
pub(crate) fn add_grads<T: Scalar>(acc: &mut ParamSet<T>, delta: &ParamSet<T>) {
    let views = delta.visit();
    for ((name, mut into), (dname, from)) in acc.visit_mut().into_iter().zip(views) {
        debug_assert_eq!(name, dname);
        into.zip_mut_with(&from, |a, &b| *a = *a + b);
    }
}
