//! Seeded randomness helpers.
//!
//! All stochastic paths in the crate draw from `ChaCha8Rng` streams seeded
//! through these helpers, so artifacts are bit-reproducible across runs and
//! platforms. Gaussian draws use Box-Muller rather than a platform-dependent
//! sampler for the same reason.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::TensorF32;

/// SplitMix64 mix of a base seed and a stream index, used to derive
/// independent per-sample / per-chain seeds from one run seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One standard-normal draw via Box-Muller.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Tensor of i.i.d. standard-normal draws.
pub fn normal_tensor<R: Rng>(shape: Vec<usize>, rng: &mut R) -> TensorF32 {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| standard_normal(rng) as f32).collect();
    TensorF32::from_parts(shape, data)
}
