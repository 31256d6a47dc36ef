//! Seed derivation.
//!
//! Every randomized stage draws from a ChaCha stream whose seed is a hash of
//! the master seed and the coordinates of the work item, so results do not
//! depend on evaluation order or thread schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags separating independent randomized stages.
pub mod stream {
    pub const MASK: u64 = 0x6d61_736b;
    pub const EM_RESTART: u64 = 0x656d_7273;
    pub const CV_FOLDS: u64 = 0x6376_666f;
    pub const CV_FIT: u64 = 0x6376_6674;
    pub const HOLDOUT: u64 = 0x686f_6c64;
    pub const PLANTED: u64 = 0x706c_6e74;
    pub const EXPERIMENT: u64 = 0x6578_7074;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash an ordered list of words into a single seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_matters() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_eq!(derive_seed(&[7, 3, 9]), derive_seed(&[7, 3, 9]));
    }
}
