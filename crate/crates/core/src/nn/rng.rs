// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded random streams split by purpose.
//!
//! All randomness comes from ChaCha8 keyed by the run seed, with one
//! independent stream per [`Stream`]. Drawing dropout masks therefore never
//! perturbs the shuffle order, and vice versa.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as StreamRng;

/// Purpose of a random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Dropout = 2,
    Shuffle = 3,
    SaeInit = 4,
    SaeShuffle = 5,
    /// Reserved for tests and synthetic fixtures.
    Fixture = 6,
}

/// Factory for the per-purpose streams of one seed.
#[derive(Clone, Copy, Debug)]
pub struct SeedStreams {
    seed: u64,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, purpose: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(purpose as u64);
        rng
    }
}
