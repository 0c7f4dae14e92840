//! Deterministic seed derivation and counter-based RNG streams.
//!
//! Every source of randomness in the crate is a ChaCha stream whose seed is
//! derived from a base seed plus a tag path, e.g. `(seed, PARTICLE, k, window)`.
//! Results are therefore independent of execution order: a particle rollout in
//! window 17 draws the same noise whether it runs first, last, or on another
//! thread.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Distinct constants keep unrelated streams decorrelated.
pub mod tags {
    pub const TRUTH: u64 = 0x74727574;
    pub const MEASUREMENT: u64 = 0x6d656173;
    pub const PRIOR: u64 = 0x7072696f;
    pub const PARTICLE: u64 = 0x70617274;
    pub const RESAMPLE: u64 = 0x72657361;
    pub const TRIAL: u64 = 0x7472696c;
    pub const INIT: u64 = 0x696e6974;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a tag path.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ 0x5350495046u64); // crate-level salt
    for &t in path {
        s = splitmix64(s ^ splitmix64(t));
    }
    s
}

/// A seeded ChaCha stream for the given tag path.
pub fn stream(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}
