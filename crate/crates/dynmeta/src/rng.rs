//! Deterministic seeded RNG streams.
//!
//! Every random draw in the crate flows through a ChaCha8 stream keyed by the
//! run seed plus a list of context tags (epoch, task index, purpose), so runs
//! are bit-reproducible from (config, seed) and independent work items never
//! share a stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby tag values.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a stream from a base seed and context tags.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(seed, tags))
}

/// Derive a child seed from a base seed and context tags.
pub fn subseed(seed: u64, tags: &[u64]) -> u64 {
    let mut state = mix(seed);
    for &t in tags {
        state = mix(state ^ mix(t));
    }
    state
}

/// 64-bit FNV-1a, used for config hashes and dataset fingerprints.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
