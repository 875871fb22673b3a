//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha8 stream derived from a
//! root seed and a fixed stream id, so adding draws in one place never
//! shifts the numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids used by the pipeline.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const STAGE1: u64 = 2;
    pub const STAGE2: u64 = 3;
    pub const JOINT_POSTERIOR: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const DATA: u64 = 7;
    pub const POSTERIOR_INIT: u64 = 8;
    pub const STAGE2_SHUFFLE: u64 = 9;
    /// Per-pair evaluation streams are `EVAL_PAIR_BASE + pair index`.
    pub const EVAL_PAIR_BASE: u64 = 1 << 32;
}

pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
