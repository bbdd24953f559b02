//! Deterministic seed derivation for parallel work units.
//!
//! All stochastic components take a `ChaCha8Rng`. Parallel tasks (stations,
//! chains, blocks, fit groups) each get an independent stream derived from
//! the master seed and a stable label, so results are reproducible and
//! independent of scheduling order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// FNV-1a over bytes; stable across platforms.
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a child seed from a parent seed and a label.
pub fn derive(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ hash_bytes(label.as_bytes()))
}

/// Derive a child seed from a parent seed and an index.
pub fn derive_idx(seed: u64, label: &str, idx: u64) -> u64 {
    splitmix64(derive(seed, label) ^ splitmix64(idx))
}

/// RNG for a labeled work unit.
pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, label))
}

/// RNG for an indexed work unit.
pub fn rng_for_idx(seed: u64, label: &str, idx: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_idx(seed, label, idx))
}
