//! Seed derivation for reproducible simulations.
//!
//! Every random stream is addressed by a `(seed, purpose, index)` triple. The
//! triple is folded through a SplitMix64 chain into a 256-bit ChaCha8 key, so a
//! stream's contents depend only on its address and never on the order in
//! which streams are created or consumed. Replicates, devices and the shared
//! scheduler can therefore run on any number of threads without changing a
//! single draw.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Counter-based stream used throughout the crate.
pub type Stream = ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// One SplitMix64 output step applied to `x`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `words` into `seed`: `h <- splitmix64(h ^ splitmix64(w))` for each word.
pub fn mix(seed: u64, words: &[u64]) -> u64 {
    words
        .iter()
        .fold(splitmix64(seed), |h, &w| splitmix64(h ^ splitmix64(w)))
}

/// What a stream is used for. The discriminant is part of the stream address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    TestSet = 2,
    RoundFlags = 3,
    CommonNoise = 4,
    ChannelNoise = 5,
    ChannelGain = 6,
    DeviceBatch = 7,
    DeviceNoise = 8,
    Replicate = 9,
    Constants = 10,
}

/// Opens the stream at `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> Stream {
    let base = mix(seed, &[purpose as u64, index]);
    let mut key = [0u8; 32];
    let mut h = base;
    for chunk in key.chunks_exact_mut(8) {
        h = splitmix64(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Seed of replicate `replicate` at sweep grid point `grid_index`.
pub fn replicate_seed(master_seed: u64, grid_index: u64, replicate: u64) -> u64 {
    mix(master_seed, &[Purpose::Replicate as u64, grid_index, replicate])
}

/// Draws a vector of `dim` i.i.d. standard normals.
pub fn standard_normal_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}
