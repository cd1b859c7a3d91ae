//! Seed derivation for reproducible runs.
//!
//! Every random stream in an experiment is derived from the single master
//! seed plus a small tuple of integers naming the stream, so results do not
//! depend on the order in which streams are created or on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used when deriving sub-seeds.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const VALIDATION: u64 = 3;
    pub const INIT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const PARTITION: u64 = 6;
    pub const CENTRAL: u64 = 7;
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a master seed with a path of stream identifiers.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_path_sensitive() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
    }
}
