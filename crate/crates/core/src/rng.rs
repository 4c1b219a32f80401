//! Seeded randomness. Every stochastic choice in the crate draws from a
//! SplitMix64 stream derived from an explicit seed.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
pub use rand_xoshiro::SplitMix64;

pub type Rng = SplitMix64;

pub fn seeded(seed: u64) -> Rng {
    SplitMix64::seed_from_u64(seed)
}

/// Derives an independent seed for a sub-stream (an image, an epoch, a layer).
pub fn derive(seed: u64, stream: u64) -> u64 {
    // one splitmix finalizer round over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal(rng: &mut Rng) -> f32 {
    StandardNormal.sample(rng)
}

/// Normal(0, std) truncated to two standard deviations by resampling.
pub fn trunc_normal(rng: &mut Rng, std: f32) -> f32 {
    loop {
        let z: f32 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Uniform on `[lo, hi)`; returns `lo` when the range is empty.
pub fn uniform(rng: &mut Rng, lo: f32, hi: f32) -> f32 {
    if hi <= lo {
        return lo;
    }
    rng.random_range(lo..hi)
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed));
    idx
}
