//! Seeded random streams.
//!
//! Every random decision in the crate draws from a ChaCha8 stream derived
//! from a 64-bit seed and a stream index, so results are reproducible across
//! platforms and independent of thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream indices used by the different consumers of a scenario seed.
pub mod stream {
    pub const PSEUDO_LABELS: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const TRAIN_INIT: u64 = 3;
    pub const TRAIN_SHUFFLE: u64 = 4;
    pub const BLOBS: u64 = 5;
    pub const NEURON_SELECT: u64 = 6;
    pub const CORRECT_KEY: u64 = 7;
    /// Restart `r` uses stream `RESTART_BASE + r`.
    pub const RESTART_BASE: u64 = 1 << 32;
}

pub fn derived(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
