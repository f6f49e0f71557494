//! Run records: one row per training run in the results CSV.
//!
//! The column order is fixed and versioned via a leading `schema` column;
//! readers reject files whose header differs from [`RunRecord::header`].
//! Floats are written with Rust's shortest round-trip formatting, so a
//! record survives CSV serialization bitwise, which is what makes ledger
//! idempotency and the determinism checks meaningful.
//!
//! A record's identity is [`run_id`]: a truncated SHA-256 over the schema
//! version, every config section that affects results, and the seed. Two
//! runs agree on `run_id` exactly when they are the same experiment.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::circuits::LayerAggregate;
use crate::datagen::DataSpec;
use crate::error::{Error, Result};
use crate::evalsuite::{EvalConfig, EvalSummary};
use crate::net::ModelConfig;
use crate::trainer::{RunStatus, TrainConfig, TrainOutcome};

/// Bump when the column set or the hash inputs change.
pub const SCHEMA_VERSION: u32 = 1;

/// Stable identity of one run: first 16 hex digits of a SHA-256 over the
/// canonical JSON of (schema version, data, model, train, eval, seed).
pub fn run_id(
    data: &DataSpec,
    model: &ModelConfig,
    train: &TrainConfig,
    eval: &EvalConfig,
    seed: u64,
) -> String {
    #[derive(Serialize)]
    struct HashInput<'a> {
        v: u32,
        data: &'a DataSpec,
        model: &'a ModelConfig,
        train: &'a TrainConfig,
        eval: &'a EvalConfig,
        seed: u64,
    }
    let bytes = serde_json::to_vec(&HashInput {
        v: SCHEMA_VERSION,
        data,
        model,
        train,
        eval,
        seed,
    })
    .expect("configs serialize");
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(16);
    for b in digest.iter().take(8) {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// One finished (or aborted) run. Accuracy and circuit fields are absent
/// for diverged runs and for encoder pretraining, which has no episode
/// protocol; `encoder_acc` is present only for encoder pretraining.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub status: RunStatus,
    pub steps: usize,
    pub wall_clock_secs: f64,
    pub final_train_loss: f64,
    pub data: DataSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: Option<EvalSummary>,
    pub encoder_acc: Option<f64>,
    /// Aggregates for the two decoder layers, when a probe ran.
    pub layers: Option<(LayerAggregate, LayerAggregate)>,
}

const HEADER: &[&str] = &[
    "schema",
    "run_id",
    "seed",
    "status",
    "steps",
    "wall_clock_secs",
    "final_train_loss",
    // data
    "mode",
    "n",
    "b",
    "l1",
    "l2",
    "k1",
    "k2",
    "d1",
    "d2",
    "eps1",
    "eps2",
    "alpha1",
    "alpha2",
    // model
    "n_layers",
    "n_heads",
    "d_model",
    "d_mlp",
    "pe_type",
    "n_labels",
    "max_t",
    "rope_base",
    "enc_layers",
    "enc_width",
    "enc_d_out",
    // train
    "lr",
    "weight_decay",
    "batch_size",
    "max_steps",
    "eval_every",
    "converge_window",
    "converge_delta",
    "stage",
    "f64_mode",
    // metrics
    "iwl",
    "icl_novel",
    "icl_swap",
    "icl",
    "cla",
    "encoder_acc",
    // circuit aggregates
    "layer1_ph1_max",
    "layer1_ph1_mean",
    "layer1_ph2_max",
    "layer1_ph2_mean",
    "layer1_ind_max",
    "layer1_ind_mean",
    "layer1_tla_max",
    "layer1_tla_mean",
    "layer2_ph1_max",
    "layer2_ph1_mean",
    "layer2_ph2_max",
    "layer2_ph2_mean",
    "layer2_ind_max",
    "layer2_ind_mean",
    "layer2_tla_max",
    "layer2_tla_mean",
];

fn f(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(f).unwrap_or_default()
}

fn agg_fields(out: &mut Vec<String>, a: Option<&LayerAggregate>) {
    match a {
        Some(a) => out.extend(
            [a.ph1_max, a.ph1_mean, a.ph2_max, a.ph2_mean, a.ind_max, a.ind_mean, a.tla_max,
                a.tla_mean]
            .map(f),
        ),
        None => out.extend(std::iter::repeat_n(String::new(), 8)),
    }
}

impl RunRecord {
    /// Assembles a record from a finished run and the configs that produced
    /// it. `model` must already have its derived fields filled (`max_t`,
    /// encoder class count) so the echo matches what actually trained.
    pub fn from_outcome<T>(
        data: &DataSpec,
        model: &ModelConfig,
        train: &TrainConfig,
        eval: &EvalConfig,
        seed: u64,
        outcome: &TrainOutcome<T>,
    ) -> RunRecord {
        let layers = outcome.circuits.as_ref().and_then(|c| {
            (c.layers.len() == 2).then(|| (c.layers[0].clone(), c.layers[1].clone()))
        });
        RunRecord {
            run_id: run_id(data, model, train, eval, seed),
            seed,
            status: outcome.status,
            steps: outcome.steps,
            wall_clock_secs: outcome.wall_secs,
            final_train_loss: outcome.final_train_loss,
            data: data.clone(),
            model: model.clone(),
            train: train.clone(),
            metrics: outcome.evals,
            encoder_acc: outcome.encoder_acc,
            layers,
        }
    }

    pub fn header() -> &'static [&'static str] {
        HEADER
    }

    /// Serializes into the fixed column order.
    pub fn to_fields(&self) -> Vec<String> {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let enc = m.m2.as_ref().and_then(|m2| m2.encoder.as_ref());
        let mut out = Vec::with_capacity(HEADER.len());
        out.push(SCHEMA_VERSION.to_string());
        out.push(self.run_id.clone());
        out.push(self.seed.to_string());
        out.push(self.status.name().to_string());
        out.push(self.steps.to_string());
        out.push(f(self.wall_clock_secs));
        out.push(f(self.final_train_loss));

        out.push(d.mode.name().to_string());
        out.extend([d.n, d.b, d.l1, d.l2, d.k1, d.k2, d.d1, d.d2].map(|v| v.to_string()));
        out.extend([d.eps1, d.eps2, d.alpha1, d.alpha2].map(f));

        out.extend([m.n_layers, m.n_heads, m.d_model, m.d_mlp].map(|v| v.to_string()));
        out.push(m.pe_type.name().to_string());
        out.extend([m.n_labels, m.max_t].map(|v| v.to_string()));
        out.push(f(m.rope_base));
        out.extend(
            [
                enc.map_or(0, |e| e.n_layers),
                enc.map_or(0, |e| e.width),
                enc.map_or(0, |e| e.d_out),
            ]
            .map(|v| v.to_string()),
        );

        out.extend([t.lr, t.weight_decay].map(f));
        out.extend([t.batch_size, t.max_steps, t.eval_every, t.converge_window]
            .map(|v| v.to_string()));
        out.push(f(t.converge_delta));
        out.push(t.stage.name().to_string());
        out.push(t.f64_mode.to_string());

        let e = self.metrics.as_ref();
        out.push(opt(e.map(|e| e.iwl)));
        out.push(opt(e.map(|e| e.icl_novel)));
        out.push(opt(e.map(|e| e.icl_swap)));
        out.push(opt(e.map(|e| e.icl)));
        out.push(opt(e.map(|e| e.cla)));
        out.push(opt(self.encoder_acc));

        agg_fields(&mut out, self.layers.as_ref().map(|l| &l.0));
        agg_fields(&mut out, self.layers.as_ref().map(|l| &l.1));
        debug_assert_eq!(out.len(), HEADER.len());
        out
    }

    /// Parses a row written by [`to_fields`]. The caller has already
    /// validated the header.
    pub fn from_fields(fields: &[String]) -> Result<RunRecord> {
        if fields.len() != HEADER.len() {
            return Err(Error::config(format!(
                "record has {} fields, schema has {}",
                fields.len(),
                HEADER.len()
            )));
        }
        let mut c = Cursor { fields, at: 0 };
        let schema: u32 = c.parse("schema")?;
        if schema != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "record schema {schema} != supported {SCHEMA_VERSION}"
            )));
        }
        let run_id = c.take().to_string();
        let seed = c.parse("seed")?;
        let status = match c.take() {
            "converged" => RunStatus::Converged,
            "max_steps" => RunStatus::MaxSteps,
            "diverged" => RunStatus::Diverged,
            other => return Err(Error::config(format!("unknown status {other:?}"))),
        };
        let steps = c.parse("steps")?;
        let wall_clock_secs = c.parse("wall_clock_secs")?;
        let final_train_loss = c.parse("final_train_loss")?;

        let mode = match c.take() {
            "unimodal" => crate::datagen::Mode::Unimodal,
            "multimodal" => crate::datagen::Mode::Multimodal,
            other => return Err(Error::config(format!("unknown mode {other:?}"))),
        };
        let data = DataSpec {
            mode,
            n: c.parse("n")?,
            b: c.parse("b")?,
            l1: c.parse("l1")?,
            l2: c.parse("l2")?,
            k1: c.parse("k1")?,
            k2: c.parse("k2")?,
            d1: c.parse("d1")?,
            d2: c.parse("d2")?,
            eps1: c.parse("eps1")?,
            eps2: c.parse("eps2")?,
            alpha1: c.parse("alpha1")?,
            alpha2: c.parse("alpha2")?,
        };
        let n_layers = c.parse("n_layers")?;
        let n_heads = c.parse("n_heads")?;
        let d_model = c.parse("d_model")?;
        let d_mlp = c.parse("d_mlp")?;
        let pe_type = match c.take() {
            "ape" => crate::net::PeType::Ape,
            "rope" => crate::net::PeType::Rope,
            "alibi" => crate::net::PeType::Alibi,
            "hybrid" => crate::net::PeType::Hybrid,
            other => return Err(Error::config(format!("unknown pe_type {other:?}"))),
        };
        let n_labels = c.parse("n_labels")?;
        let max_t = c.parse("max_t")?;
        let rope_base = c.parse("rope_base")?;
        let enc_layers: usize = c.parse("enc_layers")?;
        let enc_width: usize = c.parse("enc_width")?;
        let enc_d_out: usize = c.parse("enc_d_out")?;
        let m2 = (mode == crate::datagen::Mode::Multimodal).then(|| crate::net::M2Config {
            d2: data.d2,
            encoder: (enc_layers > 0).then(|| crate::net::EncoderConfig {
                n_layers: enc_layers,
                width: enc_width,
                d_out: enc_d_out,
                n_classes: 0,
            }),
        });
        let model = ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_mlp,
            pe_type,
            n_labels,
            max_t,
            rope_base,
            m2,
        };

        let train = TrainConfig {
            lr: c.parse("lr")?,
            weight_decay: c.parse("weight_decay")?,
            batch_size: c.parse("batch_size")?,
            max_steps: c.parse("max_steps")?,
            eval_every: c.parse("eval_every")?,
            converge_window: c.parse("converge_window")?,
            converge_delta: c.parse("converge_delta")?,
            stage: match c.take() {
                "unimodal_pretrain" => crate::trainer::Stage::UnimodalPretrain,
                "encoder_pretrain" => crate::trainer::Stage::EncoderPretrain,
                "multimodal_projector_only" => crate::trainer::Stage::MultimodalProjectorOnly,
                "multimodal_projector_decoder" => {
                    crate::trainer::Stage::MultimodalProjectorDecoder
                }
                "multimodal_all" => crate::trainer::Stage::MultimodalAll,
                "early_fusion" => crate::trainer::Stage::EarlyFusion,
                other => return Err(Error::config(format!("unknown stage {other:?}"))),
            },
            f64_mode: match c.take() {
                "true" => true,
                "false" => false,
                other => return Err(Error::config(format!("bad f64_mode {other:?}"))),
            },
        };

        let iwl = c.parse_opt("iwl")?;
        let icl_novel = c.parse_opt("icl_novel")?;
        let icl_swap = c.parse_opt("icl_swap")?;
        let icl = c.parse_opt("icl")?;
        let cla = c.parse_opt("cla")?;
        let metrics = match (iwl, icl_novel, icl_swap, icl, cla) {
            (Some(iwl), Some(icl_novel), Some(icl_swap), Some(icl), Some(cla)) => {
                Some(EvalSummary { iwl, icl_novel, icl_swap, icl, cla })
            }
            (None, None, None, None, None) => None,
            _ => return Err(Error::config("partial accuracy columns")),
        };
        let encoder_acc = c.parse_opt("encoder_acc")?;

        let l1agg = parse_agg(&mut c)?;
        let l2agg = parse_agg(&mut c)?;
        let layers = match (l1agg, l2agg) {
            (Some(a), Some(b)) => Some((a, b)),
            (None, None) => None,
            _ => return Err(Error::config("partial circuit columns")),
        };

        let rec = RunRecord {
            run_id,
            seed,
            status,
            steps,
            wall_clock_secs,
            final_train_loss,
            data,
            model,
            train,
            metrics,
            encoder_acc,
            layers,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// Checks the cross-field invariants: present metrics are finite and
    /// ICL is the mean of its two protocols.
    pub fn validate(&self) -> Result<()> {
        if let Some(e) = &self.metrics {
            for (name, v) in [
                ("iwl", e.iwl),
                ("icl_novel", e.icl_novel),
                ("icl_swap", e.icl_swap),
                ("icl", e.icl),
                ("cla", e.cla),
            ] {
                if !v.is_finite() {
                    return Err(Error::config(format!("non-finite metric {name}")));
                }
            }
            let mean = 0.5 * (e.icl_novel + e.icl_swap);
            if (e.icl - mean).abs() > 1e-12 {
                return Err(Error::config(format!(
                    "icl {} != mean of protocols {}",
                    e.icl, mean
                )));
            }
        }
        if self.run_id.len() != 16 || !self.run_id.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::config(format!("malformed run id {:?}", self.run_id)));
        }
        Ok(())
    }
}

fn parse_agg(c: &mut Cursor) -> Result<Option<LayerAggregate>> {
    let vals = [
        c.parse_opt("ph1_max")?,
        c.parse_opt("ph1_mean")?,
        c.parse_opt("ph2_max")?,
        c.parse_opt("ph2_mean")?,
        c.parse_opt("ind_max")?,
        c.parse_opt("ind_mean")?,
        c.parse_opt("tla_max")?,
        c.parse_opt("tla_mean")?,
    ];
    if vals.iter().all(Option::is_none) {
        return Ok(None);
    }
    if vals.iter().any(Option::is_none) {
        return Err(Error::config("partial circuit aggregate"));
    }
    let v = vals.map(Option::unwrap);
    Ok(Some(LayerAggregate {
        ph1_max: v[0],
        ph1_mean: v[1],
        ph2_max: v[2],
        ph2_mean: v[3],
        ind_max: v[4],
        ind_mean: v[5],
        tla_max: v[6],
        tla_mean: v[7],
    }))
}

struct Cursor<'a> {
    fields: &'a [String],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self) -> &'a str {
        let v = &self.fields[self.at];
        self.at += 1;
        v
    }

    fn parse<T: std::str::FromStr>(&mut self, name: &str) -> Result<T> {
        let raw = self.take();
        raw.parse()
            .map_err(|_| Error::config(format!("column {name}: cannot parse {raw:?}")))
    }

    fn parse_opt(&mut self, name: &str) -> Result<Option<f64>> {
        let raw = self.take();
        if raw.is_empty() {
            return Ok(None);
        }
        raw.parse()
            .map(Some)
            .map_err(|_| Error::config(format!("column {name}: cannot parse {raw:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Stage;

    fn sample_record(with_metrics: bool) -> RunRecord {
        let data = DataSpec::default();
        let model = ModelConfig {
            max_t: data.t(),
            m2: Some(crate::net::M2Config {
                d2: data.d2,
                encoder: Some(crate::net::EncoderConfig::default()),
            }),
            ..ModelConfig::default()
        };
        let train = TrainConfig { stage: Stage::MultimodalAll, ..TrainConfig::default() };
        let eval = EvalConfig::default();
        let agg = LayerAggregate {
            ph1_max: 0.8125,
            ph1_mean: 0.25,
            ph2_max: 0.1,
            ph2_mean: 0.05,
            ind_max: 0.75,
            ind_mean: 0.5,
            tla_max: 0.9,
            tla_mean: 0.625,
        };
        RunRecord {
            run_id: run_id(&data, &model, &train, &eval, 7),
            seed: 7,
            status: RunStatus::Converged,
            steps: 12_000,
            wall_clock_secs: 81.5,
            final_train_loss: 0.0123456789012345678,
            data,
            model,
            train,
            metrics: with_metrics.then(|| EvalSummary {
                iwl: 0.031,
                icl_novel: 0.97,
                icl_swap: 0.93,
                icl: 0.95,
                cla: 0.99,
            }),
            encoder_acc: None,
            layers: with_metrics.then_some((agg.clone(), agg)),
        }
    }

    #[test]
    fn header_and_fields_agree_in_length() {
        let rec = sample_record(true);
        assert_eq!(rec.to_fields().len(), RunRecord::header().len());
        let rec = sample_record(false);
        assert_eq!(rec.to_fields().len(), RunRecord::header().len());
    }

    #[test]
    fn round_trip_preserves_floats_bitwise() {
        for with_metrics in [true, false] {
            let rec = sample_record(with_metrics);
            let fields = rec.to_fields();
            let back = RunRecord::from_fields(&fields).unwrap();
            assert_eq!(back.to_fields(), fields);
            assert_eq!(
                back.final_train_loss.to_bits(),
                rec.final_train_loss.to_bits()
            );
            assert_eq!(back.run_id, rec.run_id);
            assert_eq!(back.status, rec.status);
            assert_eq!(back.metrics.is_some(), with_metrics);
        }
    }

    #[test]
    fn run_id_separates_configs_and_seeds() {
        let data = DataSpec::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let eval = EvalConfig::default();
        let a = run_id(&data, &model, &train, &eval, 0);
        let b = run_id(&data, &model, &train, &eval, 1);
        assert_ne!(a, b);
        let mut train2 = train.clone();
        train2.lr *= 2.0;
        let c = run_id(&data, &model, &train2, &eval, 0);
        assert_ne!(a, c);
        // Same inputs, same id.
        assert_eq!(a, run_id(&data, &model, &train, &eval, 0));
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn icl_mean_invariant_is_enforced() {
        let mut rec = sample_record(true);
        rec.metrics.as_mut().unwrap().icl = 0.5;
        let fields = rec.to_fields();
        assert!(RunRecord::from_fields(&fields).is_err());
    }

    #[test]
    fn partial_metric_columns_are_rejected() {
        let rec = sample_record(true);
        let mut fields = rec.to_fields();
        let iwl_col = RunRecord::header().iter().position(|&h| h == "iwl").unwrap();
        fields[iwl_col] = String::new();
        assert!(RunRecord::from_fields(&fields).is_err());
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let rec = sample_record(true);
        let mut fields = rec.to_fields();
        fields[0] = "999".to_string();
        assert!(RunRecord::from_fields(&fields).is_err());
    }
}
