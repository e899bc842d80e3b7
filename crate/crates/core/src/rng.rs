//! Seeded random streams.
//!
//! Every stochastic component draws from ChaCha8, a counter-based stream
//! cipher generator, so runs are bit-reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Generator for a 64-bit seed.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator for a named sub-stream of a run seed.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Well-known sub-stream ids.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const BATCHES: u64 = 2;
    pub const ATTACK: u64 = 3;
    pub const DATA: u64 = 4;
}
