//! Deterministic random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from a
//! `(seed, stream)` pair, so adding or removing draws in one component never
//! shifts the sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream identifiers used across the crate.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SOURCE_BATCHES: u64 = 2;
    pub const TARGET_BATCHES: u64 = 3;
    pub const MIXUP: u64 = 4;
    pub const DATA_SOURCE: u64 = 5;
    pub const DATA_TARGET: u64 = 6;
    /// Minibatch draws use `MINIBATCH_BASE + draw_index`.
    pub const MINIBATCH_BASE: u64 = 1 << 32;
}
