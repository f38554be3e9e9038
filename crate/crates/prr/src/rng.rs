//! Seed plumbing.
//!
//! Every source of randomness in the crate is a [`ChaCha8Rng`] derived from a
//! run seed through [`derive_seed`], so a run is a pure function of its
//! configuration. ChaCha streams are stable across platforms and rustc
//! versions, which keeps logged output byte-reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives an independent sub-seed from a base seed and a purpose tag.
///
/// splitmix64 finalizer over `base ^ tag * phi`; distinct tags give
/// decorrelated streams from the same base.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A deterministic RNG for the given seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
