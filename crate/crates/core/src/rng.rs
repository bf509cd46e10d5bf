//! Named random streams derived from the run seed.
//!
//! Every draw is taken from a generator keyed by (seed, stream name, index),
//! so the order in which streams are consumed never changes their values and
//! a resumed run needs no saved generator state.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, name: &str, index: u64) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update(index.to_le_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    /// `n` evaluation seeds for one candidate or one iteration.
    pub fn seeds(&self, name: &str, index: u64, n: usize) -> Vec<u64> {
        let mut rng = self.stream(name, index);
        (0..n).map(|_| rng.next_u64()).collect()
    }
}
