//! Named deterministic random streams.
//!
//! Each consumer of randomness derives its own stream from the scenario seed
//! and a stable name, so adding or removing one consumer never shifts the
//! values another one sees.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A self-contained pseudo-random stream.
#[derive(Debug, Clone)]
pub struct RandomStream {
    rng: ChaCha8Rng,
}

impl RandomStream {
    /// Derives the stream named `name` from a scenario seed. The same
    /// (seed, name) pair always yields the same sequence.
    pub fn derive(seed: u64, name: &str) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name)) }
    }

    /// A uniform sample from the inclusive range `[min, max]`.
    pub fn uniform(&mut self, min: f64, max: f64) -> f64 {
        if min >= max {
            return min;
        }
        self.rng.gen_range(min..=max)
    }
}

/// 64-bit FNV-1a over the stream name.
fn fnv1a(name: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for byte in name.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
