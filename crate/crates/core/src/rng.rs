//! Deterministic stream derivation.
//!
//! Every random decision in the crate draws from a ChaCha8 stream derived
//! from a master seed plus a list of integer tags (case index, iteration,
//! batch slot, ...). Derivation is a splitmix64 chain, so streams are
//! independent of execution order: parallel and serial generation agree,
//! and resuming a run at iteration `t` consumes exactly the same randomness
//! as an uninterrupted run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step; the standard finalizer constants.
#[inline]
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a seed with a tag path into a single stream key.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut key = splitmix64(seed);
    for &t in tags {
        key = splitmix64(key ^ t.wrapping_mul(0xd6e8_feb8_6659_fd93));
    }
    key
}

/// Derive an independent ChaCha8 stream for `(seed, tags)`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tags))
}

/// Tag constants; keeping them in one place avoids accidental collisions.
pub mod tag {
    pub const CASE: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const CROP: u64 = 4;
    pub const ORDER: u64 = 5;
}
