//! Seed plumbing. Every stochastic step draws from a ChaCha stream keyed by an
//! explicit seed; sub-seeds are derived by mixing in a stream tag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derive an independent seed for sub-stream `tag` of `seed`.
pub fn derive(seed: u64, tag: u64) -> u64 {
    mix64(mix64(seed) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `rows x cols` tensor of standard normal draws.
pub fn standard_normal(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut r))
        .collect();
    Tensor::from_vec(rows, cols, data)
}
