//! Deterministic seed derivation for parallel Monte Carlo.
//!
//! Every stochastic routine in the crate derives an independent ChaCha stream
//! from a master seed and an integer tag (edge index, replicate index,
//! restart index). Work scheduled in parallel therefore produces the same
//! output for any worker count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer, used to decorrelate derived seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a stream tag.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Derives a child seed from a master seed and two stream tags.
pub(crate) fn derive_seed2(seed: u64, tag_a: u64, tag_b: u64) -> u64 {
    derive_seed(derive_seed(seed, tag_a), tag_b)
}

/// A seeded generator for the stream identified by `tag`.
pub(crate) fn stream_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// Stream tags, one per stochastic purpose, so no two routines share a stream.
pub(crate) mod tags {
    pub const SIM_PATH: u64 = 1;
    pub const SIM_LABELS: u64 = 2;
    pub const SIM_EDGE: u64 = 3;
    pub const EM_RESTART: u64 = 4;
    pub const EM_INIT: u64 = 5;
    pub const SWEEP_CELL: u64 = 6;
    pub const BOOT_REP: u64 = 7;
    pub const DIAG_KS: u64 = 8;
    pub const DIAG_CROSS: u64 = 9;
}
