//! Seeded RNG streams.
//!
//! Every stochastic component takes a `(seed, stream)` pair so that parallel
//! workers get independent, reproducible sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// A deterministic RNG for `seed`, split by `stream` (worker id, purpose tag, ...).
pub fn stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
