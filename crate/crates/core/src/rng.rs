//! Seeded random sources. Every stochastic routine in the crate takes an
//! explicit seed or generator so runs are reproducible bit-for-bit.

use crate::Scalar;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gaussian<T: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let g: f64 = rng.sample(StandardNormal);
        T::of(g * scale)
    })
}

pub fn uniform<T: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || T::of(rng.random_range(lo..hi)))
}
