//! Seed derivation and the one PRNG used everywhere.
//!
//! All randomness flows through ChaCha20 generators seeded from 64-bit
//! values, so any artifact is reproducible from (config, seed) alone. The
//! generator name recorded in dataset metadata and checkpoints is
//! [`GENERATOR_NAME`].

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const GENERATOR_NAME: &str = "chacha20";

/// Independent sub-seed for (base seed, purpose tag): a splitmix64 scramble.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Purpose tags for seed derivation. Keeping them in one table makes stream
/// collisions impossible to introduce by accident.
pub mod tags {
    pub const DATA_PROTOTYPES: u64 = 1;
    pub const DATA_OFFSETS: u64 = 2;
    pub const DATA_SAMPLES: u64 = 3;
    pub const DATA_DIRECTION: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const INIT_STAGE1: u64 = 6;
    pub const BATCH_STAGE1: u64 = 7;
    pub const INIT_ADAPTER: u64 = 8;
    pub const BATCH_STAGE2: u64 = 9;

    /// Fold a small index (task id, domain id) into a tag.
    pub fn with_index(tag: u64, index: u64) -> u64 {
        tag.wrapping_add(index.wrapping_mul(0x0100_0000_0000)) // distinct lanes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derived_seeds_differ_by_tag_and_base() {
        assert_ne!(derive_seed(7, 1), derive_seed(7, 2));
        assert_ne!(derive_seed(7, 1), derive_seed(8, 1));
        assert_eq!(derive_seed(7, 1), derive_seed(7, 1));
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = rng_from(derive_seed(42, tags::DATA_SAMPLES));
        let mut b = rng_from(derive_seed(42, tags::DATA_SAMPLES));
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}
