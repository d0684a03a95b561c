//! Seeded random streams.
//!
//! Every randomized stage draws from its own ChaCha stream derived from the
//! run seed, so adding or removing one stage never shifts the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids used across the crate.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const WARMUP: u64 = 3;
    pub const FINETUNE: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const SYNTH: u64 = 7;
    pub const NOISE: u64 = 8;
    pub const EXTRA: u64 = 9;
}

pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
