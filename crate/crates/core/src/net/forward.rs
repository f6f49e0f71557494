//! Batched forward pass with activation caching.
//!
//! Episodes of equal length are stacked into an (E*T) x d_model matrix so the
//! projection and MLP matmuls run as large gemms; attention runs per episode
//! and head on T x T blocks. The cache stores every intermediate the manual
//! backward pass consumes. The pass is a pure function of (params, episodes):
//! repeated calls agree bitwise.
//!
//! Head knockout replaces a head's post-softmax attention matrix with zeros,
//! so the head contributes nothing while everything else is unchanged.

use ndarray::{s, Array1, Array2};

use super::ops::{rmsnorm_rows, silu, softmax_row};
use super::params::ParamSet;
use super::pe::{alibi_bias, rope_rotate_rows};
use super::ModelConfig;
use crate::datagen::{Episode, Role};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Post-softmax attention matrices captured during a probe forward pass:
/// `attn[layer][head]` is row-stochastic and causally masked.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub attn: Vec<Vec<Array2<f64>>>,
}

impl AttentionTrace {
    pub fn n_layers(&self) -> usize {
        self.attn.len()
    }

    pub fn n_heads(&self) -> usize {
        self.attn.first().map(|l| l.len()).unwrap_or(0)
    }

    pub fn t(&self) -> usize {
        self.attn[0][0].nrows()
    }
}

/// Every intermediate needed by the backward pass, laid out per layer.
pub struct ForwardCache<T> {
    pub(crate) t: usize,
    pub(crate) n_ep: usize,
    // Secondary-modality pipeline (present iff episodes are multimodal).
    pub(crate) m2_raw: Option<Array2<T>>,
    pub(crate) enc_pre: Vec<Array2<T>>,
    pub(crate) enc_act: Vec<Array2<T>>,
    pub(crate) proj_pre: Option<Array2<T>>,
    pub(crate) proj_act: Option<Array2<T>>,
    pub(crate) m2_rows: Vec<usize>,
    // Decoder blocks.
    pub(crate) x_pre: Vec<Array2<T>>,
    pub(crate) xn1: Vec<Array2<T>>,
    pub(crate) inv1: Vec<Array1<T>>,
    pub(crate) q: Vec<Array2<T>>,
    pub(crate) k: Vec<Array2<T>>,
    pub(crate) v: Vec<Array2<T>>,
    pub(crate) attn: Vec<Vec<Array2<T>>>,
    pub(crate) ctx: Vec<Array2<T>>,
    pub(crate) x_mid: Vec<Array2<T>>,
    pub(crate) xn2: Vec<Array2<T>>,
    pub(crate) inv2: Vec<Array1<T>>,
    pub(crate) h_pre: Vec<Array2<T>>,
    pub(crate) h_act: Vec<Array2<T>>,
    // Readout.
    pub(crate) x_final_rows: Array2<T>,
    pub(crate) gn: Array2<T>,
    pub(crate) invf: Array1<T>,
}

/// Feed-forward encoder over raw secondary items (rows). Returns per-layer
/// pre-activations and activations; the last activation is the feature map.
pub(crate) fn encoder_stack<T: Scalar>(
    enc: &super::params::EncoderParams<T>,
    x: &Array2<T>,
) -> (Vec<Array2<T>>, Vec<Array2<T>>) {
    let mut pre = Vec::with_capacity(enc.layers.len());
    let mut act = Vec::with_capacity(enc.layers.len());
    let mut cur = x.clone();
    for w in &enc.layers {
        let p = cur.dot(w);
        let a = silu(&p);
        pre.push(p);
        cur = a.clone();
        act.push(a);
    }
    (pre, act)
}

/// Encoder features for a single secondary item.
pub fn encode_m2<T: Scalar>(params: &ParamSet<T>, x2: &Array1<T>) -> Result<Array1<T>> {
    let enc = params
        .encoder
        .as_ref()
        .ok_or_else(|| Error::config("encoder not configured"))?;
    let row = x2.view().insert_axis(ndarray::Axis(0)).to_owned();
    let (_, act) = encoder_stack(enc, &row);
    Ok(act.last().expect("encoder has layers").row(0).to_owned())
}

/// Two-layer SiLU projector mapping a secondary feature vector into model
/// space. The input width must match the projector (encoder output when an
/// encoder is configured, raw D2 otherwise).
pub fn project_m2<T: Scalar>(params: &ParamSet<T>, x2: &Array1<T>) -> Result<Array1<T>> {
    let proj = params
        .projector
        .as_ref()
        .ok_or_else(|| Error::config("projector not configured"))?;
    if x2.len() != proj.w1.nrows() {
        return Err(Error::config(format!(
            "projector expects width {}, got {}",
            proj.w1.nrows(),
            x2.len()
        )));
    }
    let row = x2.view().insert_axis(ndarray::Axis(0)).to_owned();
    let h = silu(&row.dot(&proj.w1));
    Ok(h.dot(&proj.w2).row(0).to_owned())
}

/// Full batched forward pass. Episodes must share length and modality.
/// Returns logits (E x n_labels), the activation cache, and attention traces
/// when `capture` is set.
pub(crate) fn run_forward<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    episodes: &[&Episode],
    knockout: &[(usize, usize)],
    capture: bool,
) -> Result<(Array2<T>, ForwardCache<T>, Option<Vec<AttentionTrace>>)> {
    let n_ep = episodes.len();
    if n_ep == 0 {
        return Err(Error::config("empty episode batch"));
    }
    let t = episodes[0].t();
    let d = cfg.d_model;
    for ep in episodes {
        if ep.t() != t {
            return Err(Error::config("episodes in a batch must share length"));
        }
        if ep.d_model() != d {
            return Err(Error::config(format!(
                "episode width {} != d_model {}",
                ep.d_model(),
                d
            )));
        }
        if ep.is_multimodal() != episodes[0].is_multimodal() {
            return Err(Error::config("episodes in a batch must share modality"));
        }
    }
    if t > cfg.max_t {
        return Err(Error::index(format!("episode length {t} exceeds max_t {}", cfg.max_t)));
    }
    for &(l, h) in knockout {
        if l >= cfg.n_layers || h >= cfg.n_heads {
            return Err(Error::config(format!("knockout head ({l},{h}) out of range")));
        }
    }

    let rows = n_ep * t;
    let mut x: Array2<T> = Array2::zeros((rows, d));
    for (e, ep) in episodes.iter().enumerate() {
        for ti in 0..t {
            let mut out = x.row_mut(e * t + ti);
            for j in 0..d {
                out[j] = T::from_f64c(ep.tokens[[ti, j]] as f64);
            }
        }
    }

    // Secondary-modality rows: raw items -> (encoder) -> projector -> tokens.
    let multimodal = episodes[0].is_multimodal();
    let (m2_raw, enc_pre, enc_act, proj_pre, proj_act, m2_rows) = if multimodal {
        let proj = params
            .projector
            .as_ref()
            .ok_or_else(|| Error::config("multimodal episodes need a projector"))?;
        let d2 = episodes[0].m2_raw.as_ref().expect("multimodal").ncols();
        let mut m2_rows = Vec::new();
        for (e, ep) in episodes.iter().enumerate() {
            for (ti, role) in ep.roles.iter().enumerate() {
                if matches!(role, Role::Item2 | Role::QueryItem2) {
                    m2_rows.push(e * t + ti);
                }
            }
        }
        let per_ep = m2_rows.len() / n_ep;
        let mut raw: Array2<T> = Array2::zeros((m2_rows.len(), d2));
        for (e, ep) in episodes.iter().enumerate() {
            let src = ep.m2_raw.as_ref().expect("multimodal");
            if src.nrows() != per_ep {
                return Err(Error::config("m2 row count mismatch"));
            }
            for i in 0..per_ep {
                let mut out = raw.row_mut(e * per_ep + i);
                for j in 0..d2 {
                    out[j] = T::from_f64c(src[[i, j]] as f64);
                }
            }
        }
        let (enc_pre, enc_act, feats) = match &params.encoder {
            Some(enc) => {
                let (pre, act) = encoder_stack(enc, &raw);
                let f = act.last().expect("encoder has layers").clone();
                (pre, act, f)
            }
            None => (Vec::new(), Vec::new(), raw.clone()),
        };
        if feats.ncols() != proj.w1.nrows() {
            return Err(Error::config("projector input width mismatch"));
        }
        let proj_pre = feats.dot(&proj.w1);
        let proj_act = silu(&proj_pre);
        let projected = proj_act.dot(&proj.w2);
        for (i, &row) in m2_rows.iter().enumerate() {
            x.row_mut(row).assign(&projected.row(i));
        }
        (Some(raw), enc_pre, enc_act, Some(proj_pre), Some(proj_act), m2_rows)
    } else {
        (None, Vec::new(), Vec::new(), None, None, Vec::new())
    };

    // Learned position table added to embeddings before the first layer.
    if let Some(ape) = &params.ape {
        for e in 0..n_ep {
            for ti in 0..t {
                let mut out = x.row_mut(e * t + ti);
                let add = ape.row(ti);
                for j in 0..d {
                    out[j] = out[j] + add[j];
                }
            }
        }
    }

    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = T::from_f64c(1.0 / (dh as f64).sqrt());
    let positions: Vec<usize> = (0..t).collect();
    let neg_inf = T::neg_infinity();
    let alibi: Vec<Array2<T>> = if cfg.pe_type == super::PeType::Alibi {
        (0..n_heads).map(|h| alibi_bias(t, h, n_heads)).collect()
    } else {
        Vec::new()
    };

    let mut cache = ForwardCache {
        t,
        n_ep,
        m2_raw,
        enc_pre,
        enc_act,
        proj_pre,
        proj_act,
        m2_rows,
        x_pre: Vec::with_capacity(cfg.n_layers),
        xn1: Vec::with_capacity(cfg.n_layers),
        inv1: Vec::with_capacity(cfg.n_layers),
        q: Vec::with_capacity(cfg.n_layers),
        k: Vec::with_capacity(cfg.n_layers),
        v: Vec::with_capacity(cfg.n_layers),
        attn: Vec::with_capacity(cfg.n_layers),
        ctx: Vec::with_capacity(cfg.n_layers),
        x_mid: Vec::with_capacity(cfg.n_layers),
        xn2: Vec::with_capacity(cfg.n_layers),
        inv2: Vec::with_capacity(cfg.n_layers),
        h_pre: Vec::with_capacity(cfg.n_layers),
        h_act: Vec::with_capacity(cfg.n_layers),
        x_final_rows: Array2::zeros((0, 0)),
        gn: Array2::zeros((0, 0)),
        invf: Array1::zeros(0),
    };
    let mut traces: Option<Vec<AttentionTrace>> = capture.then(|| {
        (0..n_ep)
            .map(|_| AttentionTrace {
                attn: vec![Vec::with_capacity(n_heads); cfg.n_layers],
            })
            .collect()
    });

    for (li, layer) in params.layers.iter().enumerate() {
        cache.x_pre.push(x.clone());
        let (xn, inv) = rmsnorm_rows(&x, &layer.g1);
        let mut q = xn.dot(&layer.wq);
        let mut k = xn.dot(&layer.wk);
        let v = xn.dot(&layer.wv);
        if cfg.pe_type.uses_rope() {
            for e in 0..n_ep {
                let r0 = e * t;
                for h in 0..n_heads {
                    let c0 = h * dh;
                    let mut qb = q.slice_mut(s![r0..r0 + t, c0..c0 + dh]);
                    rope_rotate_rows(&mut qb, &positions, cfg.rope_base, false);
                    let mut kb = k.slice_mut(s![r0..r0 + t, c0..c0 + dh]);
                    rope_rotate_rows(&mut kb, &positions, cfg.rope_base, false);
                }
            }
        }

        let mut ctx: Array2<T> = Array2::zeros((rows, d));
        let mut layer_attn: Vec<Array2<T>> = Vec::with_capacity(n_ep * n_heads);
        for e in 0..n_ep {
            let r0 = e * t;
            for h in 0..n_heads {
                let c0 = h * dh;
                let qb = q.slice(s![r0..r0 + t, c0..c0 + dh]);
                let kb = k.slice(s![r0..r0 + t, c0..c0 + dh]);
                let mut scores = qb.dot(&kb.t());
                scores.mapv_inplace(|v| v * scale);
                if !alibi.is_empty() {
                    scores.zip_mut_with(&alibi[h], |a, &b| *a = *a + b);
                }
                for i in 0..t {
                    for j in i + 1..t {
                        scores[[i, j]] = neg_inf;
                    }
                }
                for i in 0..t {
                    softmax_row(scores.row_mut(i).into_slice().expect("contiguous row"));
                }
                if knockout.contains(&(li, h)) {
                    scores.fill(T::zero());
                }
                if let Some(tr) = traces.as_mut() {
                    tr[e].attn[li].push(scores.mapv(|v| v.to_f64c()));
                }
                let vb = v.slice(s![r0..r0 + t, c0..c0 + dh]);
                let out = scores.dot(&vb);
                ctx.slice_mut(s![r0..r0 + t, c0..c0 + dh]).assign(&out);
                layer_attn.push(scores);
            }
        }
        let attn_out = ctx.dot(&layer.wo);
        x.zip_mut_with(&attn_out, |a, &b| *a = *a + b);

        cache.xn1.push(xn);
        cache.inv1.push(inv);
        cache.q.push(q);
        cache.k.push(k);
        cache.v.push(v);
        cache.attn.push(layer_attn);
        cache.ctx.push(ctx);

        cache.x_mid.push(x.clone());
        let (xn2, inv2) = rmsnorm_rows(&x, &layer.g2);
        let h_pre = xn2.dot(&layer.w_in);
        let h_act = silu(&h_pre);
        let mlp_out = h_act.dot(&layer.w_out);
        x.zip_mut_with(&mlp_out, |a, &b| *a = *a + b);

        cache.xn2.push(xn2);
        cache.inv2.push(inv2);
        cache.h_pre.push(h_pre);
        cache.h_act.push(h_act);
    }

    let mut final_rows: Array2<T> = Array2::zeros((n_ep, d));
    for e in 0..n_ep {
        final_rows.row_mut(e).assign(&x.row(e * t + t - 1));
    }
    let (gn, invf) = rmsnorm_rows(&final_rows, &params.g_final);
    let logits = gn.dot(&params.w_cls);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite logits in forward pass"));
    }
    cache.x_final_rows = final_rows;
    cache.gn = gn;
    cache.invf = invf;

    Ok((logits, cache, traces))
}

/// Batched forward returning logits and optional attention traces.
pub fn forward_batch<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    episodes: &[&Episode],
    capture: bool,
) -> Result<(Array2<T>, Option<Vec<AttentionTrace>>)> {
    let (logits, _, traces) = run_forward(params, cfg, episodes, &[], capture)?;
    Ok((logits, traces))
}

/// Single-episode forward.
pub fn forward<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    episode: &Episode,
    capture: bool,
) -> Result<(Array1<T>, Option<AttentionTrace>)> {
    let (logits, traces) = forward_batch(params, cfg, &[episode], capture)?;
    Ok((
        logits.row(0).to_owned(),
        traces.map(|mut v| v.remove(0)),
    ))
}

/// Forward with the listed heads' attention matrices zeroed after softmax.
pub fn forward_batch_knockout<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    episodes: &[&Episode],
    knockout: &[(usize, usize)],
) -> Result<Array2<T>> {
    let (logits, _, _) = run_forward(params, cfg, episodes, knockout, false)?;
    Ok(logits)
}
