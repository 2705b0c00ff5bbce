//! Per-purpose seed derivation.
//!
//! Every random draw in a run descends from one master seed. Each consumer
//! asks for a stream by purpose plus up to two integer coordinates (client,
//! round, batch, ...). Derivation is a SplitMix64 cascade, so streams are
//! stable across platforms and independent of call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a seed stream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Partition = 3,
    Minibatch = 4,
    Reparam = 5,
    ReconNoise = 6,
    Diagnostics = 7,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a list of coordinates.
pub fn mix(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Seed for `stream` at coordinates `(a, b)`.
pub fn derive(master: u64, stream: Stream, a: u64, b: u64) -> u64 {
    mix(master, &[stream as u64, a, b])
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    rng(derive(master, stream, a, b))
}
