//! The model: a small decoder-only transformer with pre-norm blocks
//! (RMSNorm, causal multi-head attention, SiLU MLP), pluggable positional
//! encodings, and an optional secondary-modality pipeline (feed-forward
//! encoder plus MLP projector) that maps raw secondary items into model
//! space.
//!
//! Items enter at native dimension: `d_model` equals the primary input
//! width, there is no input embedding, and no tensor carries a bias.

pub mod checkpoint;
pub mod forward;
pub mod ops;
pub mod params;
pub mod pe;

pub use forward::{forward, forward_batch, forward_batch_knockout, AttentionTrace, ForwardCache};
pub use params::{init_params, EncoderParams, LayerParams, ParamSet, ProjectorParams};
pub use pe::{alibi_slope, apply_position};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positional-encoding variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeType {
    /// Learned additive position table, zero-initialized, added to token
    /// embeddings before the first layer.
    Ape,
    /// Rotary pairwise rotations of queries and keys.
    Rope,
    /// Additive pre-softmax distance bias with per-head slopes.
    Alibi,
    /// APE table plus rotary rotations.
    Hybrid,
}

impl PeType {
    pub fn uses_ape_table(&self) -> bool {
        matches!(self, PeType::Ape | PeType::Hybrid)
    }

    pub fn uses_rope(&self) -> bool {
        matches!(self, PeType::Rope | PeType::Hybrid)
    }

    pub fn name(&self) -> &'static str {
        match self {
            PeType::Ape => "ape",
            PeType::Rope => "rope",
            PeType::Alibi => "alibi",
            PeType::Hybrid => "hybrid",
        }
    }
}

/// Secondary-modality encoder hyperparameters. The encoder is a feed-forward
/// stack with SiLU activations; its classification head is used only while
/// pretraining the encoder and is dropped afterwards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub width: usize,
    pub d_out: usize,
    /// Class count for the pretraining head; 0 means "fill from data".
    pub n_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { n_layers: 3, width: 256, d_out: 64, n_classes: 0 }
    }
}

/// Secondary-modality input pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct M2Config {
    /// Raw secondary input dimension.
    pub d2: usize,
    /// Optional encoder between raw items and the projector.
    pub encoder: Option<EncoderConfig>,
}

impl Default for M2Config {
    fn default() -> Self {
        M2Config { d2: 32, encoder: None }
    }
}

/// Decoder architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub pe_type: PeType,
    pub n_labels: usize,
    /// Longest supported sequence; sizes the APE table. 0 means "fill from data".
    pub max_t: usize,
    pub rope_base: f64,
    /// Present iff the model consumes a secondary modality.
    pub m2: Option<M2Config>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 1,
            d_model: 64,
            d_mlp: 256,
            pe_type: PeType::Ape,
            n_labels: 32,
            max_t: 0,
            rope_base: 10_000.0,
            m2: None,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Input width of the projector: encoder output if present, else raw D2.
    pub fn projector_in(&self) -> Option<usize> {
        self.m2
            .as_ref()
            .map(|m| m.encoder.as_ref().map(|e| e.d_out).unwrap_or(m.d2))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::config("n_layers and n_heads must be >= 1"));
        }
        if self.d_model == 0 || self.d_mlp == 0 || self.n_labels == 0 {
            return Err(Error::config("d_model, d_mlp, n_labels must be >= 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model={} must be divisible by n_heads={}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_t == 0 {
            return Err(Error::config("max_t must be set before building a model"));
        }
        if self.pe_type.uses_rope() {
            if self.head_dim() % 2 != 0 {
                return Err(Error::config("rotary encoding needs an even head dimension"));
            }
            if self.rope_base <= 1.0 {
                return Err(Error::config("rope_base must exceed 1"));
            }
        }
        if let Some(m2) = &self.m2 {
            if m2.d2 == 0 {
                return Err(Error::config("d2 must be >= 1"));
            }
            if let Some(enc) = &m2.encoder {
                if enc.n_layers == 0 || enc.width == 0 || enc.d_out == 0 {
                    return Err(Error::config("encoder needs n_layers, width, d_out >= 1"));
                }
            }
        }
        Ok(())
    }
}
