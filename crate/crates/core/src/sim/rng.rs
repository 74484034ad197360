//! Deterministic random streams keyed by `(seed, worker, round, purpose)`.
//!
//! Every consumer draws from its own stream, so the order in which workers
//! are scheduled cannot change any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Worker slot used for streams that belong to the server or the adversary.
pub const SERVER: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Data = 1,
    Init = 2,
    Batch = 3,
    Vote = 4,
    Attack = 5,
    Order = 6,
    Diagnostics = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a tuple of words.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x2545_f491_4f6c_dd1d, |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(seed: u64, worker: u64, round: u64, purpose: Purpose) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, worker, round, purpose as u64]))
}
