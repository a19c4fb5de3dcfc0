//! Seeded, splittable random streams.
//!
//! Every stochastic routine takes an explicit `(seed, stream)` pair so that
//! parallel paths and chains reproduce bit-for-bit regardless of scheduling.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::ComplexArray;

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Circularly-symmetric standard complex normal draws, E|z|^2 = 1.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> ComplexArray {
    let mut z = ComplexArray::zeros(shape);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for v in z.data_mut() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *v = Complex64::new(re * s, im * s);
    }
    z
}
