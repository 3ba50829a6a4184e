//! Seed derivation and deterministic generators.
//!
//! Every random draw in the lab goes through a [`ChaCha8Rng`] seeded from a
//! value derived here, so results do not depend on thread scheduling or
//! platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of indices into an independent sub-seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

/// Stream tags so different consumers of the same base seed never collide.
pub mod stream {
    pub const PATTERNS: u64 = 0x7061_7474;
    pub const SYNTH: u64 = 0x7379_6e74;
    pub const EDITOR: u64 = 0x6564_6974;
    pub const TRAIN: u64 = 0x7472_6e00;
    pub const EVAL: u64 = 0x6576_616c;
    pub const NOISE: u64 = 0x6e6f_6973;
    pub const ORACLE: u64 = 0x6f72_636c;
    pub const FAMILY: u64 = 0x6661_6d6c;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
        let a: u64 = rng_from(3, &[4]).random();
        let b: u64 = rng_from(3, &[4]).random();
        assert_eq!(a, b);
    }
}
