//! Seed derivation for independent random streams.
//!
//! Streams are keyed by a master seed plus a tuple of integers (stage tag,
//! step, batch index, group index, ...). Keys are folded through SplitMix64
//! so that each stream is independent of how many other streams exist and of
//! the order in which they are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags mixed into the first key slot.
pub mod stage {
    pub const VOCAB: u64 = 0x564f_4341_4200_0001;
    pub const SCENARIOS_TRAIN: u64 = 0x5343_4e54_5200_0002;
    pub const SCENARIOS_HELDOUT: u64 = 0x5343_4e48_4f00_0003;
    pub const INIT: u64 = 0x494e_4954_0000_0004;
    pub const SFT: u64 = 0x5346_5400_0000_0005;
    pub const QUERY: u64 = 0x5155_4552_5900_0006;
    pub const CANDIDATE: u64 = 0x4341_4e44_0000_0007;
    pub const REQUEST_ID: u64 = 0x5245_5149_4400_0008;
    pub const NOISE: u64 = 0x4e4f_4953_4500_0009;
    pub const SFT_CORPUS: u64 = 0x5346_5443_0000_000a;
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed`.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, parts))
}
