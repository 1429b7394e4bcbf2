//! Seeded random streams.
//!
//! Every random quantity in a run is drawn from a ChaCha8 stream identified by
//! a `(seed, stream)` pair, so independent consumers never share state and a
//! run is reproducible from its seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream identifiers used by the algorithm drivers.
pub mod streams {
    pub const CRITIC_CHAIN: u64 = 1;
    pub const ACTOR_CHAIN: u64 = 2;
    pub const REWARD_NOISE: u64 = 3;
    pub const OUTPUT_ITERATE: u64 = 4;
}

pub fn substream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws an index from a discrete distribution given a uniform draw `u` in [0,1).
///
/// Falls back to the last index with positive mass when rounding leaves `u`
/// past the cumulative total.
pub fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}
