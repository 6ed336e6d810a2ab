//! Seed derivation.
//!
//! Every stochastic node and sampler gets its own stream, derived from the
//! run seed plus a list of tags (step index, branch name, layer index, ...).
//! Skipping a branch therefore never shifts the randomness seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base` to produce an independent child seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable numeric tags for branch names.
pub mod tag {
    pub const INIT: u64 = 0x11;
    pub const DATA: u64 = 0x12;
    pub const SAMPLER: u64 = 0x13;
    pub const BRANCH_STUDENT: u64 = 0x21;
    pub const BRANCH_TARGET: u64 = 0x22;
    pub const BRANCH_TEACHER: u64 = 0x23;
    pub const BRANCH_MIX: u64 = 0x24;
    pub const MIX_PAIRS: u64 = 0x25;
    pub const MUR_SOLVER: u64 = 0x31;
    pub const MUR_STUDENT: u64 = 0x32;
    pub const WEIGHTS: u64 = 0x41;
    pub const NOISE: u64 = 0x42;
    pub const DROPOUT: u64 = 0x43;
}
