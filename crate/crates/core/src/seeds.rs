//! Deterministic seed derivation.
//!
//! Every stochastic component (weight init, epoch shuffles, dropout masks,
//! splits, synthetic data) draws from its own ChaCha8 stream whose seed is
//! derived from the single user-facing seed plus fixed stream constants.
//! Runs are therefore reproducible bit-for-bit, and reordering or
//! parallelizing independent components cannot perturb each other's draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fixed stream ids; the values are arbitrary but must never change.
pub mod stream {
    pub const SPLIT: u64 = 0x01;
    pub const EXPERT_INIT: u64 = 0x02;
    pub const GATE_INIT: u64 = 0x03;
    pub const SHUFFLE_STAGE1: u64 = 0x04;
    pub const SHUFFLE_STAGE2: u64 = 0x05;
    pub const DROPOUT_STAGE1: u64 = 0x06;
    pub const DROPOUT_STAGE2: u64 = 0x07;
    pub const SYNTH: u64 = 0x08;
}

/// SplitMix64 finalizer: a cheap, well-distributed 64-bit mixer.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a child seed from the master seed and up to two stream coordinates
/// (e.g. stream id + expert index, or stream id + epoch).
pub fn derive(master: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(a)) ^ splitmix64(b.wrapping_add(0x51ed_270b)))
}

pub fn rng(master: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, a, b))
}
