//! Experiment configuration: strict JSON with dotted-path overrides.
//!
//! An empty file (or no file) yields the full default experiment. Every
//! section rejects unknown keys. `--set a.b.c=value` edits are applied to
//! the raw JSON tree before deserialization, so they see exactly the same
//! validation as hand-written files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use icl_core::datagen::{DataSpec, Mode};
use icl_core::error::{Error, Result};
use icl_core::evalsuite::EvalConfig;
use icl_core::net::{EncoderConfig, M2Config, ModelConfig};
use icl_core::trainer::{Stage, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

/// Stage-1 training overrides. When absent, pretraining stages reuse the
/// main train section with only the stage swapped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    /// Unimodal decoder pretraining (stage forced to `unimodal_pretrain`).
    pub decoder: Option<TrainConfig>,
    /// Encoder classification pretraining (stage forced to `encoder_pretrain`).
    pub encoder: Option<TrainConfig>,
}

/// Sweep grid: dotted config paths to value lists, crossed with seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    /// Axis name (dotted config path) -> values. Expanded in sorted key
    /// order so cell enumeration is stable.
    pub axes: BTreeMap<String, Vec<Value>>,
    pub seeds: Vec<u64>,
    /// Concurrent worker processes; 1 = run cells in this process.
    pub workers: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec { axes: BTreeMap::new(), seeds: vec![0], workers: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub data: DataSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub pretrain: PretrainSection,
    pub sweep: SweepSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 0,
            data: DataSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            pretrain: PretrainSection::default(),
            sweep: SweepSpec::default(),
        }
    }
}

/// Reads the raw JSON tree (missing path = empty object) and applies `--set`
/// overrides to it.
pub fn load_tree(path: Option<&Path>, sets: &[String]) -> Result<Value> {
    let mut tree: Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(serde_json::Map::new()),
    };
    if !tree.is_object() {
        return Err(Error::config("config root must be a JSON object"));
    }
    for s in sets {
        apply_set(&mut tree, s)?;
    }
    Ok(tree)
}

/// Deserializes a raw tree, applies the seed flag, then resolves derived
/// fields and validates.
pub fn from_tree(tree: Value, seed_flag: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = serde_json::from_value(tree)
        .map_err(|e| Error::config(format!("config: {e}")))?;
    if let Some(seed) = seed_flag {
        cfg.seed = seed;
    }
    resolve(&mut cfg)?;
    Ok(cfg)
}

/// Reads a config file (optional), applies `--set` overrides and the seed
/// flag, then resolves derived fields and validates.
pub fn load(
    path: Option<&Path>,
    sets: &[String],
    seed_flag: Option<u64>,
) -> Result<ExperimentConfig> {
    from_tree(load_tree(path, sets)?, seed_flag)
}

/// Applies one `key=value` override. The value is parsed as JSON when it is
/// valid JSON, else taken as a bare string (so `pe_type=rope` works without
/// quoting).
pub fn apply_set(tree: &mut Value, setting: &str) -> Result<()> {
    let (key, raw) = setting
        .split_once('=')
        .ok_or_else(|| Error::config(format!("--set needs key=value, got {setting:?}")))?;
    if key.is_empty() {
        return Err(Error::config("--set key is empty"));
    }
    let value: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::config(format!("--set {key}: {} is not an object", parts[..i].join(".")))
        })?;
        if i == parts.len() - 1 {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(serde_json::Map::new()));
    }
    unreachable!("loop returns on the last part");
}

/// Fills derived fields and cross-checks sections.
///
/// Fill rules: `model.max_t == 0` takes the data layout's sequence length;
/// `model.n_labels == 0` takes `data.l1`; a missing `model.m2` on
/// multimodal data gets the default encoder wiring with `d2` from data; an
/// encoder with `n_classes == 0` classifies over `data.k2`.
pub fn resolve(cfg: &mut ExperimentConfig) -> Result<()> {
    if cfg.version != CONFIG_VERSION {
        return Err(Error::config(format!(
            "config version {} != supported {CONFIG_VERSION}",
            cfg.version
        )));
    }
    cfg.data.validate()?;
    if cfg.sweep.seeds.is_empty() {
        return Err(Error::config("sweep.seeds must be nonempty"));
    }
    if cfg.sweep.workers == 0 {
        return Err(Error::config("sweep.workers must be >= 1"));
    }

    let m = &mut cfg.model;
    if m.n_labels == 0 {
        m.n_labels = cfg.data.l1;
    }
    if m.n_labels != cfg.data.l1 {
        return Err(Error::config(format!(
            "model.n_labels {} must equal data.l1 {} (0 derives it)",
            m.n_labels, cfg.data.l1
        )));
    }
    if m.d_model != cfg.data.d1 {
        return Err(Error::config(format!(
            "model.d_model {} must equal data.d1 {}: primary items enter the \
             decoder directly",
            m.d_model, cfg.data.d1
        )));
    }
    match cfg.data.mode {
        Mode::Unimodal => {
            if m.m2.is_some() {
                return Err(Error::config("model.m2 set but data.mode is unimodal"));
            }
        }
        Mode::Multimodal => {
            let m2 = m.m2.get_or_insert_with(|| M2Config {
                d2: cfg.data.d2,
                encoder: Some(EncoderConfig::default()),
            });
            if m2.d2 != cfg.data.d2 {
                return Err(Error::config(format!(
                    "model.m2.d2 {} must equal data.d2 {}",
                    m2.d2, cfg.data.d2
                )));
            }
            if let Some(enc) = &mut m2.encoder {
                if enc.n_classes == 0 {
                    enc.n_classes = cfg.data.k2;
                }
            }
        }
    }
    if m.max_t == 0 {
        m.max_t = cfg.data.t();
    }
    if m.max_t < cfg.data.t() {
        return Err(Error::config(format!(
            "model.max_t {} is shorter than the data layout's {}",
            m.max_t,
            cfg.data.t()
        )));
    }
    m.validate()?;
    cfg.train.validate()?;
    stage_mode_check(cfg.train.stage, cfg.data.mode, m)?;
    if let Some(d) = &cfg.pretrain.decoder {
        d.validate()?;
    }
    if let Some(e) = &cfg.pretrain.encoder {
        e.validate()?;
    }
    Ok(())
}

/// The stages that require a secondary modality, and the one that forbids it.
fn stage_mode_check(stage: Stage, mode: Mode, model: &ModelConfig) -> Result<()> {
    match stage {
        Stage::UnimodalPretrain => Ok(()), // runs on the derived unimodal spec
        Stage::EncoderPretrain => {
            if mode != Mode::Multimodal {
                return Err(Error::config("encoder_pretrain needs multimodal data"));
            }
            let has_encoder =
                model.m2.as_ref().is_some_and(|m2| m2.encoder.is_some());
            if !has_encoder {
                return Err(Error::config("encoder_pretrain needs model.m2.encoder"));
            }
            Ok(())
        }
        Stage::MultimodalProjectorOnly
        | Stage::MultimodalProjectorDecoder
        | Stage::MultimodalAll
        | Stage::EarlyFusion => {
            if mode != Mode::Multimodal {
                return Err(Error::config(format!(
                    "stage {} needs multimodal data",
                    stage.name()
                )));
            }
            Ok(())
        }
    }
}

/// Serializes the resolved config back to a JSON string (checkpoint echo).
pub fn echo_json(cfg: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}
