//! Counter-based random streams.
//!
//! Every random decision in training and evaluation draws from a stream keyed
//! by `(global_seed, purpose, epoch, index)`. The generator is ChaCha8
//! (`rand_chacha::ChaCha8Rng`): the 256-bit key is expanded from
//! `(global_seed, purpose)` with SplitMix64, and the 64-bit ChaCha stream id is
//! `epoch << 32 | index`. Streams are therefore independent of the order in
//! which they are requested, which makes per-sample augmentation replayable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as StreamRng;

/// What a stream is used for. The discriminant is part of the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    WeakAug = 3,
    StrongAug = 4,
    Dropout = 5,
    Codebook = 6,
    Probe = 7,
    Sample = 8,
    Synthetic = 9,
    Subsample = 10,
    SecondStrongAug = 11,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, purpose: Purpose, epoch: u32, index: u32) -> ChaCha8Rng {
    let mut state = seed ^ (purpose as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}
