//! Deterministic random streams.
//!
//! Every random draw comes from a ChaCha8 stream keyed by the master seed and
//! indexed by `(epoch, slot)`. Particles use their index as slot, so results do
//! not depend on how work is scheduled across threads, and a checkpoint only
//! needs the seed and the epoch counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Slot reserved for serial draws (resampling, bisection fallbacks).
pub const SERIAL_SLOT: u32 = u32::MAX;

pub fn stream(seed: u64, epoch: u64, slot: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) | slot as u64);
    rng
}

/// Epoch counter that hands out fresh stream indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StreamClock {
    pub seed: u64,
    pub epoch: u64,
}

impl StreamClock {
    pub fn new(seed: u64) -> Self {
        Self { seed, epoch: 0 }
    }

    /// Advances to a new epoch and returns it.
    pub fn tick(&mut self) -> u64 {
        self.epoch += 1;
        self.epoch
    }

    pub fn stream(&self, epoch: u64, slot: u32) -> ChaCha8Rng {
        stream(self.seed, epoch, slot)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(9, 1, 0).random();
        let b: u64 = stream(9, 1, 0).random();
        let c: u64 = stream(9, 1, 1).random();
        let d: u64 = stream(9, 2, 0).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
