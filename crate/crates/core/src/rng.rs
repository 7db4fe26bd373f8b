//! Seed streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator addressed by
//! `(seed, stream)`, so independent jobs can be scheduled in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed; used to fan a base seed out into per-job seeds.
pub fn derive(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the combined word
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// Stream tags used across the crate.
pub(crate) const INIT: u64 = 1;
pub(crate) const NOISE: u64 = 2;
pub(crate) const SHUFFLE: u64 = 3;
pub(crate) const BATCH: u64 = 4;
pub(crate) const SELECT: u64 = 6;
