//! Attention-circuit measurements and causal interventions.
//!
//! Three trace statistics track the induction circuit as it forms:
//!
//! - `ph_strength` (offset o): mean attention from each position to the
//!   position o steps earlier. A previous-token head scores near 1 at o=1.
//! - `ind_strength`: mean attention from the query position to the label
//!   positions of context exemplars sharing the query's class (the set P).
//! - `tla`: total attention from the query position to all context label
//!   positions (the set Y), a coarser "looks at labels at all" measure.
//!
//! All three lie in [0,1] because attention rows are stochastic. The causal
//! tools are head knockout (zeroing a head's post-softmax attention) and
//! modality zeroing (blanking one modality's input vectors).

use ndarray::Array2;
use serde::Serialize;

use crate::datagen::{Episode, EpisodeSource, EvalMode, Role};
use crate::error::{Error, Result};
use crate::net::{forward_batch, forward_batch_knockout, AttentionTrace, ModelConfig, ParamSet};
use crate::rng::{self, tags};
use crate::scalar::Scalar;

/// Which head implements which role, by 0-based (layer, head) index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
    pub kind: HeadKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HeadKind {
    PrevToken,
    Induction,
}

/// Per-head trace statistics, averaged over a probe set.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct HeadMetrics {
    pub ph1: f64,
    pub ph2: f64,
    pub ind: f64,
    pub tla: f64,
}

/// Max/mean over heads within one layer.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LayerAggregate {
    pub ph1_max: f64,
    pub ph1_mean: f64,
    pub ph2_max: f64,
    pub ph2_mean: f64,
    pub ind_max: f64,
    pub ind_mean: f64,
    pub tla_max: f64,
    pub tla_mean: f64,
}

/// Full probe report: per-head values and per-layer aggregates.
#[derive(Debug, Clone, Serialize)]
pub struct CircuitMetrics {
    /// Indexed `[layer][head]`.
    pub per_head: Vec<Vec<HeadMetrics>>,
    pub layers: Vec<LayerAggregate>,
}

impl CircuitMetrics {
    fn from_per_head(per_head: Vec<Vec<HeadMetrics>>) -> Self {
        let layers = per_head
            .iter()
            .map(|heads| {
                let mut agg = LayerAggregate::default();
                let n = heads.len() as f64;
                for m in heads {
                    agg.ph1_max = agg.ph1_max.max(m.ph1);
                    agg.ph2_max = agg.ph2_max.max(m.ph2);
                    agg.ind_max = agg.ind_max.max(m.ind);
                    agg.tla_max = agg.tla_max.max(m.tla);
                    agg.ph1_mean += m.ph1 / n;
                    agg.ph2_mean += m.ph2 / n;
                    agg.ind_mean += m.ind / n;
                    agg.tla_mean += m.tla / n;
                }
                agg
            })
            .collect();
        CircuitMetrics { per_head, layers }
    }
}

/// Mean attention from each position i to position i−o, per head of `layer`.
///
/// Averages over i = o..T−1; the first o positions have no valid source.
pub fn ph_strength(trace: &AttentionTrace, layer: usize, offset: usize) -> Result<Vec<f64>> {
    let heads = layer_heads(trace, layer)?;
    let t = trace.t();
    if t <= offset {
        return Err(Error::config(format!(
            "ph_strength offset {offset} needs sequence length > {offset}, got {t}"
        )));
    }
    Ok(heads
        .iter()
        .map(|a| {
            let mut sum = 0.0f64;
            for i in offset..t {
                sum += a[(i, i - offset)];
            }
            sum / (t - offset) as f64
        })
        .collect())
}

/// Mean attention from the query position to the matching label positions P
/// (labels of context exemplars sharing the query's class), per head.
///
/// Undefined when P is empty, as in IWL episodes; that is reported as an
/// error rather than a silent zero.
pub fn ind_strength(
    trace: &AttentionTrace,
    layer: usize,
    episode: &Episode,
) -> Result<Vec<f64>> {
    let heads = layer_heads(trace, layer)?;
    check_trace_episode(trace, episode)?;
    let p = episode.matching_label_positions();
    if p.is_empty() {
        return Err(Error::undefined(
            "ind_strength undefined: no context exemplar matches the query class",
        ));
    }
    let q = episode.target_row();
    Ok(heads
        .iter()
        .map(|a| p.iter().map(|&j| a[(q, j)]).sum::<f64>() / p.len() as f64)
        .collect())
}

/// Total attention from the query position to all context label positions,
/// per head of `layer`.
pub fn tla(trace: &AttentionTrace, layer: usize, episode: &Episode) -> Result<Vec<f64>> {
    let heads = layer_heads(trace, layer)?;
    check_trace_episode(trace, episode)?;
    let q = episode.target_row();
    let y = episode.label_positions();
    Ok(heads
        .iter()
        .map(|a| y.iter().map(|&j| a[(q, j)]).sum::<f64>())
        .collect())
}

fn layer_heads<'a>(trace: &'a AttentionTrace, layer: usize) -> Result<&'a [Array2<f64>]> {
    trace
        .attn
        .get(layer)
        .map(|v| v.as_slice())
        .ok_or_else(|| Error::index(format!("layer {layer} out of range")))
}

fn check_trace_episode(trace: &AttentionTrace, episode: &Episode) -> Result<()> {
    if trace.t() != episode.t() {
        return Err(Error::index(format!(
            "trace length {} does not match episode length {}",
            trace.t(),
            episode.t()
        )));
    }
    Ok(())
}

/// Accumulates per-head metrics over a set of (trace, episode) pairs.
///
/// Metrics are linear in the trace, so the batch value is the mean of the
/// per-episode values.
pub fn metrics_from_traces(
    traces: &[AttentionTrace],
    episodes: &[&Episode],
) -> Result<CircuitMetrics> {
    if traces.is_empty() || traces.len() != episodes.len() {
        return Err(Error::config(format!(
            "need equal nonzero trace/episode counts, got {} and {}",
            traces.len(),
            episodes.len()
        )));
    }
    let n_layers = traces[0].n_layers();
    let n_heads = traces[0].n_heads();
    let mut sums = vec![vec![HeadMetrics::default(); n_heads]; n_layers];
    for (trace, ep) in traces.iter().zip(episodes) {
        for layer in 0..n_layers {
            let ph1 = ph_strength(trace, layer, 1)?;
            let ph2 = ph_strength(trace, layer, 2)?;
            let ind = ind_strength(trace, layer, ep)?;
            let tl = tla(trace, layer, ep)?;
            for h in 0..n_heads {
                sums[layer][h].ph1 += ph1[h];
                sums[layer][h].ph2 += ph2[h];
                sums[layer][h].ind += ind[h];
                sums[layer][h].tla += tl[h];
            }
        }
    }
    let n = traces.len() as f64;
    for layer in &mut sums {
        for m in layer {
            m.ph1 /= n;
            m.ph2 /= n;
            m.ind /= n;
            m.tla /= n;
        }
    }
    Ok(CircuitMetrics::from_per_head(sums))
}

/// Chunk size for probe forward passes (traces are T×T per head, so kept
/// smaller than evaluation chunks).
const PROBE_CHUNK: usize = 32;

/// Runs the model on a fixed-seed ICL-Novel probe set and averages the
/// trace metrics. Novel episodes guarantee a nonempty matching set P.
pub fn probe_metrics<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    source: &EpisodeSource,
    n_probe: usize,
    seed: u64,
) -> Result<CircuitMetrics> {
    if n_probe == 0 {
        return Err(Error::config("n_probe must be >= 1"));
    }
    let mut rng = rng::rng_for(seed, tags::PROBE);
    let mut acc: Option<CircuitMetrics> = None;
    let mut done = 0usize;
    while done < n_probe {
        let take = (n_probe - done).min(PROBE_CHUNK);
        let episodes: Vec<Episode> = (0..take)
            .map(|_| source.episode(EvalMode::IclNovel, &mut rng))
            .collect::<Result<_>>()?;
        let refs: Vec<&Episode> = episodes.iter().collect();
        let (_, traces) = forward_batch(params, cfg, &refs, true)?;
        let traces = traces.expect("capture requested");
        let chunk = metrics_from_traces(&traces, &refs)?;
        acc = Some(match acc {
            None => scale_metrics(&chunk, take as f64 / n_probe as f64),
            Some(prev) => add_scaled(&prev, &chunk, take as f64 / n_probe as f64),
        });
        done += take;
    }
    let sums = acc.expect("n_probe >= 1");
    Ok(CircuitMetrics::from_per_head(sums.per_head))
}

fn scale_metrics(m: &CircuitMetrics, w: f64) -> CircuitMetrics {
    let per_head = m
        .per_head
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|h| HeadMetrics {
                    ph1: h.ph1 * w,
                    ph2: h.ph2 * w,
                    ind: h.ind * w,
                    tla: h.tla * w,
                })
                .collect()
        })
        .collect();
    CircuitMetrics::from_per_head(per_head)
}

fn add_scaled(a: &CircuitMetrics, b: &CircuitMetrics, w: f64) -> CircuitMetrics {
    let per_head = a
        .per_head
        .iter()
        .zip(&b.per_head)
        .map(|(ha, hb)| {
            ha.iter()
                .zip(hb)
                .map(|(x, y)| HeadMetrics {
                    ph1: x.ph1 + y.ph1 * w,
                    ph2: x.ph2 + y.ph2 * w,
                    ind: x.ind + y.ind * w,
                    tla: x.tla + y.tla * w,
                })
                .collect()
        })
        .collect();
    CircuitMetrics::from_per_head(per_head)
}

/// Locates the previous-token head (argmax ph1 over first-layer heads) and
/// the induction head (argmax ind over second-layer heads). Ties break to
/// the lowest head index.
pub fn identify_heads(metrics: &CircuitMetrics) -> Result<(HeadId, HeadId)> {
    if metrics.per_head.len() < 2 {
        return Err(Error::config("head identification needs at least 2 layers"));
    }
    let prev = argmax_head(&metrics.per_head[0], |m| m.ph1);
    let ind = argmax_head(&metrics.per_head[1], |m| m.ind);
    Ok((
        HeadId { layer: 0, head: prev, kind: HeadKind::PrevToken },
        HeadId { layer: 1, head: ind, kind: HeadKind::Induction },
    ))
}

/// Probe-then-identify convenience over a fixed-seed ICL-Novel set.
pub fn identify_heads_probed<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    source: &EpisodeSource,
    n_probe: usize,
    seed: u64,
) -> Result<(HeadId, HeadId)> {
    let metrics = probe_metrics(params, cfg, source, n_probe, seed)?;
    identify_heads(&metrics)
}

fn argmax_head(heads: &[HeadMetrics], f: impl Fn(&HeadMetrics) -> f64) -> usize {
    let mut best = 0usize;
    for (h, m) in heads.iter().enumerate().skip(1) {
        if f(m) > f(&heads[best]) {
            best = h;
        }
    }
    best
}

/// Forward pass with the listed heads' post-softmax attention zeroed, so
/// those heads contribute nothing. Empty set reproduces the plain forward
/// bitwise.
pub fn knockout_forward<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    episodes: &[&Episode],
    heads: &[HeadId],
) -> Result<Array2<T>> {
    for id in heads {
        if id.layer >= cfg.n_layers || id.head >= cfg.n_heads {
            return Err(Error::config(format!(
                "knockout head ({}, {}) outside model with {} layers, {} heads",
                id.layer, id.head, cfg.n_layers, cfg.n_heads
            )));
        }
    }
    let pairs: Vec<(usize, usize)> = heads.iter().map(|id| (id.layer, id.head)).collect();
    forward_batch_knockout(params, cfg, episodes, &pairs)
}

/// Which modality to blank in `modality_zero`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Modality {
    M1,
    M2,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::M1 => "m1",
            Modality::M2 => "m2",
        }
    }
}

/// Returns a copy of the episode with one modality's input vectors (context
/// and query) replaced by zeros. Labels, roles, and the other modality are
/// untouched. Zero M2 inputs stay zero through the projector because it has
/// no bias terms.
pub fn modality_zero(episode: &Episode, which: Modality) -> Result<Episode> {
    if !episode.is_multimodal() {
        return Err(Error::config("modality_zero requires a multimodal episode"));
    }
    let mut out = episode.clone();
    match which {
        Modality::M1 => {
            for (i, role) in out.roles.iter().enumerate() {
                if matches!(role, Role::Item1 | Role::QueryItem1) {
                    out.tokens.row_mut(i).fill(0.0);
                }
            }
        }
        Modality::M2 => {
            if let Some(raw) = out.m2_raw.as_mut() {
                raw.fill(0.0);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{DataSpec, Mode};
    use crate::net::init_params;
    use ndarray::Array2;

    /// Uniform causal attention: row i holds 1/(i+1) on positions 0..=i.
    fn uniform_trace(t: usize, n_layers: usize, n_heads: usize) -> AttentionTrace {
        let mut a = Array2::<f64>::zeros((t, t));
        for i in 0..t {
            for j in 0..=i {
                a[(i, j)] = 1.0 / (i as f64 + 1.0);
            }
        }
        AttentionTrace {
            attn: vec![vec![a; n_heads]; n_layers],
        }
    }

    fn unimodal_episode(mode: EvalMode, seed: u64) -> Episode {
        let spec = DataSpec { mode: Mode::Unimodal, k1: 128, ..DataSpec::default() };
        let source = EpisodeSource::new(&spec, seed).unwrap();
        let mut rng = crate::rng::rng_for(seed, 99);
        source.episode(mode, &mut rng).unwrap()
    }

    #[test]
    fn uniform_trace_closed_forms() {
        // T=17, o=1: mean over i=1..16 of 1/(i+1) = (H_17 - 1)/16.
        let t = 17usize;
        let trace = uniform_trace(t, 2, 1);
        let ep = unimodal_episode(EvalMode::Train, 11);
        assert_eq!(ep.t(), t);

        let h17: f64 = (1..=17).map(|i| 1.0 / i as f64).sum();
        let ph = ph_strength(&trace, 0, 1).unwrap()[0];
        assert!((ph - (h17 - 1.0) / 16.0).abs() < 1e-9, "ph {ph}");

        let ind = ind_strength(&trace, 1, &ep).unwrap()[0];
        assert!((ind - 1.0 / 17.0).abs() < 1e-9, "ind {ind}");

        let t_val = tla(&trace, 1, &ep).unwrap()[0];
        assert!((t_val - 8.0 / 17.0).abs() < 1e-9, "tla {t_val}");
    }

    #[test]
    fn perfect_prev_token_head_scores_one_at_offset_one_zero_at_two() {
        let t = 9usize;
        let mut a = Array2::<f64>::zeros((t, t));
        a[(0, 0)] = 1.0;
        for i in 1..t {
            a[(i, i - 1)] = 1.0;
        }
        let trace = AttentionTrace { attn: vec![vec![a]] };
        assert_eq!(ph_strength(&trace, 0, 1).unwrap()[0], 1.0);
        assert_eq!(ph_strength(&trace, 0, 2).unwrap()[0], 0.0);
    }

    #[test]
    fn point_mass_on_single_match_gives_ind_one() {
        // B=1: the query's class appears exactly once in context.
        let spec = DataSpec { mode: Mode::Unimodal, b: 1, k1: 128, ..DataSpec::default() };
        let source = EpisodeSource::new(&spec, 3).unwrap();
        let mut rng = crate::rng::rng_for(3, 5);
        let ep = source.episode(EvalMode::Train, &mut rng).unwrap();
        let p = ep.matching_label_positions();
        assert_eq!(p.len(), 1);

        let t = ep.t();
        let mut a = Array2::<f64>::zeros((t, t));
        a[(ep.target_row(), p[0])] = 1.0;
        let trace = AttentionTrace { attn: vec![vec![a]] };
        assert_eq!(ind_strength(&trace, 0, &ep).unwrap()[0], 1.0);
    }

    #[test]
    fn burst_count_sets_matching_positions() {
        let ep = unimodal_episode(EvalMode::Train, 21);
        assert_eq!(ep.matching_label_positions().len(), 4);
    }

    #[test]
    fn iwl_episode_reports_undefined_ind() {
        let ep = unimodal_episode(EvalMode::Iwl, 13);
        let trace = uniform_trace(ep.t(), 1, 1);
        let err = ind_strength(&trace, 0, &ep).unwrap_err();
        assert!(matches!(err, Error::Undefined(_)));
    }

    #[test]
    fn tla_dominates_ind_times_match_count() {
        use rand::Rng;
        // P is a subset of Y, so summing over Y can only add mass.
        let mut rng = crate::rng::rng_for(17, 23);
        for trial in 0..20 {
            let ep = unimodal_episode(EvalMode::Train, 100 + trial);
            let t = ep.t();
            // Random stochastic rows.
            let mut a = Array2::<f64>::zeros((t, t));
            for i in 0..t {
                let mut row_sum = 0.0f64;
                for j in 0..=i {
                    let v: f64 = rng.random_range(0.0..1.0f64);
                    a[(i, j)] = v;
                    row_sum += v;
                }
                for j in 0..=i {
                    a[(i, j)] /= row_sum.max(1e-12);
                }
            }
            let trace = AttentionTrace { attn: vec![vec![a]] };
            let ind = ind_strength(&trace, 0, &ep).unwrap()[0];
            let tl = tla(&trace, 0, &ep).unwrap()[0];
            let p = ep.matching_label_positions().len() as f64;
            assert!(tl + 1e-9 >= ind * p, "tla {tl} < ind {ind} * |P| {p}");
        }
    }

    #[test]
    fn planted_head_is_identified() {
        // 2 layers x 4 heads; previous-token behavior planted at head 2 of
        // layer 0, induction behavior at head 3 of layer 1.
        let ep = unimodal_episode(EvalMode::Train, 31);
        let t = ep.t();
        let uniform = uniform_trace(t, 1, 1).attn[0][0].clone();

        let mut prev = Array2::<f64>::zeros((t, t));
        prev[(0, 0)] = 1.0;
        for i in 1..t {
            prev[(i, i - 1)] = 1.0;
        }
        let p = ep.matching_label_positions();
        let mut induct = Array2::<f64>::zeros((t, t));
        for i in 0..t - 1 {
            induct[(i, 0)] = 1.0;
        }
        for &j in &p {
            induct[(t - 1, j)] = 1.0 / p.len() as f64;
        }

        let layer0 = vec![uniform.clone(), uniform.clone(), prev, uniform.clone()];
        let layer1 = vec![uniform.clone(), uniform.clone(), uniform.clone(), induct];
        let trace = AttentionTrace { attn: vec![layer0, layer1] };
        let metrics = metrics_from_traces(&[trace], &[&ep]).unwrap();
        let (pt, ih) = identify_heads(&metrics).unwrap();
        assert_eq!((pt.layer, pt.head, pt.kind), (0, 2, HeadKind::PrevToken));
        assert_eq!((ih.layer, ih.head, ih.kind), (1, 3, HeadKind::Induction));
    }

    #[test]
    fn batch_metrics_equal_mean_of_singles() {
        let ep1 = unimodal_episode(EvalMode::Train, 41);
        let ep2 = unimodal_episode(EvalMode::Train, 42);
        let tr1 = uniform_trace(ep1.t(), 2, 2);
        // A different trace: previous-token point masses.
        let t = ep2.t();
        let mut prev = Array2::<f64>::zeros((t, t));
        prev[(0, 0)] = 1.0;
        for i in 1..t {
            prev[(i, i - 1)] = 1.0;
        }
        let tr2 = AttentionTrace { attn: vec![vec![prev.clone(), prev.clone()]; 2] };

        let single1 = metrics_from_traces(&[tr1.clone()], &[&ep1]).unwrap();
        let single2 = metrics_from_traces(&[tr2.clone()], &[&ep2]).unwrap();
        let both = metrics_from_traces(&[tr1, tr2], &[&ep1, &ep2]).unwrap();
        for layer in 0..2 {
            for h in 0..2 {
                let a = single1.per_head[layer][h];
                let b = single2.per_head[layer][h];
                let c = both.per_head[layer][h];
                assert!((c.ph1 - 0.5 * (a.ph1 + b.ph1)).abs() < 1e-12);
                assert!((c.tla - 0.5 * (a.tla + b.tla)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn metrics_stay_in_unit_interval_on_model_traces() {
        let spec = DataSpec { mode: Mode::Unimodal, k1: 64, ..DataSpec::default() };
        let source = EpisodeSource::new(&spec, 6).unwrap();
        let cfg = ModelConfig { n_heads: 2, max_t: 17, ..ModelConfig::default() };
        let params = init_params::<f32>(&cfg, 6).unwrap();
        let m = probe_metrics(&params, &cfg, &source, 48, 6).unwrap();
        for layer in &m.per_head {
            for h in layer {
                for v in [h.ph1, h.ph2, h.ind, h.tla] {
                    assert!((0.0..=1.0).contains(&v), "metric {v} outside [0,1]");
                }
            }
        }
        for (agg, heads) in m.layers.iter().zip(&m.per_head) {
            let mean = heads.iter().map(|h| h.ind).sum::<f64>() / heads.len() as f64;
            assert!((agg.ind_mean - mean).abs() < 1e-12);
            let max = heads.iter().map(|h| h.ind).fold(f64::MIN, f64::max);
            assert!((agg.ind_max - max).abs() < 1e-12);
        }
    }

    #[test]
    fn knockout_validates_head_indices() {
        let spec = DataSpec { mode: Mode::Unimodal, k1: 64, ..DataSpec::default() };
        let source = EpisodeSource::new(&spec, 8).unwrap();
        let cfg = ModelConfig { max_t: 17, ..ModelConfig::default() };
        let params = init_params::<f32>(&cfg, 8).unwrap();
        let mut rng = crate::rng::rng_for(8, 1);
        let ep = source.episode(EvalMode::Train, &mut rng).unwrap();
        let bad = HeadId { layer: 0, head: 5, kind: HeadKind::PrevToken };
        assert!(knockout_forward(&params, &cfg, &[&ep], &[bad]).is_err());
        let ok = HeadId { layer: 1, head: 0, kind: HeadKind::Induction };
        assert!(knockout_forward(&params, &cfg, &[&ep], &[ok]).is_ok());
    }

    #[test]
    fn modality_zero_blanks_only_the_chosen_side() {
        let spec = DataSpec::default();
        let source = EpisodeSource::new(&spec, 12).unwrap();
        let mut rng = crate::rng::rng_for(12, 2);
        let ep = source.episode(EvalMode::Train, &mut rng).unwrap();

        let z1 = modality_zero(&ep, Modality::M1).unwrap();
        for (i, role) in z1.roles.iter().enumerate() {
            let row = z1.tokens.row(i);
            match role {
                Role::Item1 | Role::QueryItem1 => {
                    assert!(row.iter().all(|&v| v == 0.0));
                }
                Role::Label => {
                    assert_eq!(row, ep.tokens.row(i));
                }
                _ => {}
            }
        }
        assert_eq!(z1.m2_raw.as_ref().unwrap(), ep.m2_raw.as_ref().unwrap());
        assert_eq!(z1.roles, ep.roles);
        assert_eq!(z1.label_ids, ep.label_ids);

        let z2 = modality_zero(&ep, Modality::M2).unwrap();
        assert!(z2.m2_raw.as_ref().unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(z2.tokens, ep.tokens);

        let uni_spec = DataSpec { mode: Mode::Unimodal, ..DataSpec::default() };
        let uni_source = EpisodeSource::new(&uni_spec, 12).unwrap();
        let uni = uni_source.episode(EvalMode::Train, &mut rng).unwrap();
        assert!(modality_zero(&uni, Modality::M1).is_err());
    }
}
