//! Seed derivation and stateless hashing.
//!
//! Every stochastic component in the pipeline draws from a seed derived here,
//! so identical inputs always replay identically. Stateless hashes back the
//! procedural noise fields, which must be pure functions of coordinates.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of splitmix64: a well-mixed 64-bit permutation.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Hash a coordinate pair plus seed into a uniform u64.
pub fn hash3(seed: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed ^ 0x51ed_270b) ^ a.wrapping_mul(0x9e37_79b9)) ^ b)
}

/// Uniform value in [0, 1) from a hash.
pub fn hash_unit(seed: u64, a: u64, b: u64) -> f64 {
    (hash3(seed, a, b) >> 11) as f64 / (1u64 << 53) as f64
}

/// Derive a child seed from a parent seed, a stream tag, and an index.
///
/// Distinct tags give statistically independent streams, so components never
/// consume each other's randomness even when sharing a master seed.
pub fn derive(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = seed ^ 0xcbf2_9ce4_8422_2325;
    for byte in tag.as_bytes() {
        h = splitmix64(h ^ u64::from(*byte));
    }
    splitmix64(h ^ index.wrapping_mul(0x2545_f491_4f6c_dd1d))
}

/// Seeded generator used wherever a stateful RNG is needed.
pub fn chacha(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
