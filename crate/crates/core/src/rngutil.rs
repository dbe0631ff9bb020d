//! Seed derivation and deterministic RNG construction.
//!
//! Every random stream in the crate is a [`ChaCha8Rng`] seeded through
//! [`child_seed`], so results depend only on the user-facing seeds and
//! never on platform or thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over a byte slice; stable across platforms.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive an independent child seed from a base seed, a stream tag, and an index.
pub fn child_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = fnv1a(tag.as_bytes());
    h ^= base;
    h = h.wrapping_mul(0x100000001b3);
    h ^= index;
    h = h.wrapping_mul(0x100000001b3);
    // final avalanche (splitmix64 tail)
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d049bb133111eb);
    h ^ (h >> 31)
}

/// Seeded RNG for a named stream.
pub fn stream_rng(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(base, tag, index))
}
