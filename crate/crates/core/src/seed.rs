//! Stable seed derivation.
//!
//! Every random stream in the crate is seeded from one master seed mixed with
//! a path of integer tags (quarter, day, replicate, ...). The mixing is a
//! SplitMix64 finalizer chain, so the same path always yields the same seed
//! regardless of the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` and a path of tags.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut state = mix(master.wrapping_add(GOLDEN));
    for &tag in path {
        state = mix(state ^ mix(tag.wrapping_add(GOLDEN)).wrapping_add(GOLDEN));
    }
    state
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tags used to keep independent streams apart.
pub mod stream {
    pub const SIMULATE: u64 = 1;
    pub const DAILY_MCMC: u64 = 2;
    pub const CALIBRATE: u64 = 3;
}
