//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from a
//! run seed and a stream id, so adding draws in one place never perturbs
//! another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used by the trainer and CLI.
pub mod streams {
    pub const POPULATION: u64 = 1;
    pub const ROLLOUT: u64 = 2;
    pub const REPLAY: u64 = 3;
    pub const QUANTILES: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const BANDIT: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const INIT: u64 = 8;
}
