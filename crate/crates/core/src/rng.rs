//! Deterministic, splittable random number generation. A single root seed
//! drives every source of randomness; substreams are derived by hashing the
//! parent seed with a tag, so adding a consumer never perturbs the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a tag.
pub fn derive(seed: u64, tag: &str) -> u64 {
    let mut h = mix(seed);
    for b in tag.bytes() {
        h = mix(h ^ u64::from(b));
    }
    h
}

/// Derive a child seed from a parent seed and an index.
pub fn derive_idx(seed: u64, tag: &str, idx: u64) -> u64 {
    mix(derive(seed, tag) ^ mix(idx))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng(seed: u64, tag: &str) -> ChaCha8Rng {
    rng_from(derive(seed, tag))
}
