//! Keyed random streams.
//!
//! Every random draw in a run comes from a stream addressed by
//! `(seed, purpose, round, client, slot)`. Streams never share state, so the
//! order in which client tasks execute cannot influence any value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    ProblemData = 1,
    ClientSampling = 2,
    Minibatch = 3,
    Uplink = 4,
    Downlink = 5,
    RoundCoin = 6,
    ShiftInit = 7,
    Certificate = 8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub purpose: Purpose,
    pub round: u64,
    pub client: u64,
    pub slot: u64,
}

impl StreamKey {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        StreamKey {
            seed,
            purpose,
            round: 0,
            client: 0,
            slot: 0,
        }
    }

    pub fn round(mut self, round: usize) -> Self {
        self.round = round as u64;
        self
    }

    pub fn client(mut self, client: usize) -> Self {
        self.client = client as u64;
        self
    }

    pub fn slot(mut self, slot: u64) -> Self {
        self.slot = slot;
        self
    }

    pub fn rng(&self) -> StreamRng {
        let mut state = splitmix64(self.seed ^ 0x6a09_e667_f3bc_c908);
        let mut seed = [0u8; 32];
        let words = [
            self.purpose as u64,
            self.round,
            self.client,
            self.slot,
        ];
        for (chunk, word) in seed.chunks_exact_mut(8).zip(words) {
            state = splitmix64(state ^ word);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
