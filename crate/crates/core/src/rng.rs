//! Explicit random streams.
//!
//! Every stochastic operation takes a [`Stream`]. Streams are ChaCha8
//! generators keyed by a 64-bit seed plus a stream id, so independent
//! sub-streams (one per trial, per view, per epoch) can be derived without
//! any global state.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seed for a family of independent streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    seed: u64,
    path: u64,
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        Self { seed, path: 0 }
    }

    /// Child key for `index`; distinct indices yield distinct streams.
    pub fn derive(self, index: u64) -> Self {
        Self {
            seed: self.seed,
            path: splitmix(self.path ^ splitmix(index.wrapping_add(0x9e37_79b9_7f4a_7c15))),
        }
    }

    pub fn stream(self) -> Stream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.path);
        Stream { rng }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic random stream.
#[derive(Clone, Debug)]
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn from_seed(seed: u64) -> Self {
        StreamKey::new(seed).stream()
    }
}

impl RngCore for Stream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}
