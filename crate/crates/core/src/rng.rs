//! Counter-based seed derivation. Every random stream in the crate is keyed
//! by a base seed plus a path of counters, so streams never depend on the
//! order in which other streams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with each counter in `path`.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &c| splitmix64(acc ^ splitmix64(c.wrapping_add(0x5851_F42D_4C95_7F2D))))
}

pub fn rng_for(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, path))
}

/// Stream tags, so different consumers of one base seed never collide.
pub mod stream {
    pub const PATIENT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const VIEWS: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const FINETUNE: u64 = 6;
    pub const GRADCHECK: u64 = 7;
}
