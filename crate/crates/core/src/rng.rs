//! Seed derivation. Every random consumer gets its own ChaCha stream derived
//! from `(seed, stream, index)`, so results never depend on the order in which
//! independent consumers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_SPLIT: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_TRAIN: u64 = 3;
pub const STREAM_VALIDATION: u64 = 4;
pub const STREAM_EVAL: u64 = 5;
pub const STREAM_DATA: u64 = 6;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ index)
}

pub fn stream_rng(seed: u64, stream: u64, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}
