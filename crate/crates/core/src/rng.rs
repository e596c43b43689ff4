//! Seed derivation and noise sampling.
//!
//! Every random quantity in the crate comes from a ChaCha8 stream whose seed is
//! derived from explicit integers, so results never depend on call order across
//! threads.

use ndarray::{Array, Dimension, ShapeBuilder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream tags that keep independent uses of one user seed apart.
pub mod stream {
    pub const INIT: u64 = 0x494e_4954;
    pub const DRAWS: u64 = 0x4452_4157;
    pub const EVAL: u64 = 0x4556_414c;
    pub const PROBE: u64 = 0x5052_4f42;
    pub const SAMPLER: u64 = 0x5341_4d50;
    pub const PARAMS: u64 = 0x5041_524d;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a list of integers into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

pub fn standard_normal<D, Sh>(rng: &mut ChaCha8Rng, shape: Sh) -> Array<f64, D>
where
    D: Dimension,
    Sh: ShapeBuilder<Dim = D>,
{
    Array::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}
