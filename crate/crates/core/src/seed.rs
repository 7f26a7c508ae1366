//! Seed fan-out.
//!
//! Every random stream in a run is derived from the single user seed by
//! hashing a path of integer keys with SplitMix64:
//!
//! ```text
//! derive(seed, [k0, k1, ...]) = mix(... mix(mix(seed ^ GOLDEN) ^ k0) ^ k1 ...)
//! ```
//!
//! Paths used across the crate are listed by the `keys` constants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod keys {
    /// `[STAGE, n]`: stage `n` of a pipeline (1-based).
    pub const STAGE: u64 = 1;
    /// `[MASK, subject_index]`: per-subject undersampling mask.
    pub const MASK: u64 = 2;
    /// `[GEN_INIT]` below a stage seed.
    pub const GEN_INIT: u64 = 3;
    /// `[DISC_INIT]` below a stage seed.
    pub const DISC_INIT: u64 = 4;
    /// `[SHUFFLE, epoch]` below a stage seed.
    pub const SHUFFLE: u64 = 5;
    /// `[PHANTOM, subject_index]`.
    pub const PHANTOM: u64 = 6;
    /// `[SPLIT]`: manifest split permutation.
    pub const SPLIT: u64 = 7;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed ^ GOLDEN), |acc, &k| mix(acc ^ k))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
