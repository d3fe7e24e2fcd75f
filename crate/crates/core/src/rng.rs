//! Seed-derived random streams.
//!
//! Every random decision in a run is drawn from a stream keyed by
//! `(seed, purpose, a, b)`, typically `(round, client)`. Streams never share
//! state, so the order in which workers consume them cannot change a draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for; part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Partition = 2,
    Depth = 3,
    StragglerSubset = 4,
    Speed = 5,
    Batch = 6,
    Synthetic = 7,
    Probe = 8,
    MonteCarlo = 9,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, purpose, a, b)`.
pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64) -> StreamRng {
    let mut key = [0u8; 32];
    let mut h = splitmix(seed);
    for (i, word) in [purpose as u64, a, b, 0x5a1f].into_iter().enumerate() {
        h = splitmix(h ^ word.rotate_left(17 * i as u32 + 1));
        key[8 * i..8 * i + 8].copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
