//! Deterministic RNG derivation.
//!
//! Every random source in a run is a ChaCha8 stream whose seed is derived
//! from the run seed and a fixed purpose tag, so independent stages (bank
//! sampling, init, training stream, each eval mode, probes) never share or
//! race on a generator, and any stage can be reproduced in isolation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams. Values are part of the reproducibility
/// contract: changing them changes every downstream sample.
pub mod tags {
    pub const LABEL_SPACE: u64 = 0x01;
    pub const BANK_M1: u64 = 0x02;
    pub const BANK_M2: u64 = 0x03;
    pub const INIT: u64 = 0x04;
    pub const TRAIN_STREAM: u64 = 0x05;
    pub const EVAL_BASE: u64 = 0x10; // + eval-mode discriminant
    pub const PROBE: u64 = 0x20;
    pub const GRAD_CHECK: u64 = 0x21;
    pub const ENCODER_STREAM: u64 = 0x22;
}

/// SplitMix64 finalizer; decorrelates (seed, tag) pairs into sub-seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a sub-seed for a (run seed, purpose tag) pair.
pub fn derive_seed(root: u64, tag: u64) -> u64 {
    splitmix64(root ^ splitmix64(tag))
}

/// A fresh deterministic generator for one purpose within a run.
pub fn rng_for(root: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag))
}
