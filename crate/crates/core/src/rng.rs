//! Deterministic random streams.
//!
//! Every source of randomness is a ChaCha stream keyed by a 64-bit seed.
//! Sub-streams are derived by mixing path words into the master seed
//! (counter-based splitting), so the stream used at (run r, step n) never
//! depends on how many draws earlier steps consumed.

#[allow(unused_imports)]
use num_traits::Float as _;

use alloc::vec::Vec;

use rand::distributions::Distribution;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
pub use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SplitMix64 finalizer; full-period bijective mixer.
#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `master` and an ordered path of words.
///
/// Distinct paths give statistically independent streams; the same path
/// always gives the same stream.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut acc = splitmix64(master ^ 0xA0761D6478BD642F);
    for &w in path {
        acc = splitmix64(acc ^ splitmix64(w.wrapping_add(0xE703_7ED1_A0B4_28DB)));
    }
    acc
}

/// ChaCha stream for one derived seed.
pub fn stream(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

/// Standard normal draw cast through `f64` so every element type sees the
/// same underlying stream.
pub fn next_normal<T: Scalar>(rng: &mut ChaCha8Rng) -> T {
    let x: f64 = StandardNormal.sample(rng);
    T::of_f64(x)
}

/// Tensor of independent standard normal draws.
pub fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel).map(|_| next_normal(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape/product consistency")
}

/// Uniform draw from `lo..=hi`.
pub fn uniform_usize(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

/// Uniform draw from `[0,1)`.
pub fn uniform_unit(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(0.0..1.0)
}
