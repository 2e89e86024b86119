//! Seeded random streams. Every stochastic routine takes one of these.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent child stream derived from `(seed, stream)`.
pub fn derive(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A plain integer seed for the child stream `(seed, stream)`.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    derive(seed, stream).next_u64()
}
