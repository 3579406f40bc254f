//! Seed derivation so every random stream depends only on a master seed and
//! a fixed tuple of coordinates, never on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, coords: &[u64]) -> u64 {
    coords.iter().fold(splitmix(master), |acc, &c| splitmix(acc ^ splitmix(c)))
}

pub fn stream(master: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, coords))
}

/// Stable tags for the different consumers of randomness.
pub mod tag {
    pub const TRAIN_SCENE: u64 = 1;
    pub const EVAL_SCENE: u64 = 2;
    pub const LABELED_ORDER: u64 = 3;
    pub const UNLABELED_ORDER: u64 = 4;
    pub const LABELED_AUG: u64 = 5;
    pub const WEAK_AUG: u64 = 6;
    pub const STRONG_AUG: u64 = 7;
    pub const INIT: u64 = 8;
}
