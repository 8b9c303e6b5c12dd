//! Seeded weight initializers. Values are drawn in `f64` and cast, so the
//! same seed yields the same weights (up to rounding) in either precision.

use rand::Rng;

use crate::real::Real;
use crate::tensor::Tensor;

fn uniform<T: Real, R: Rng + ?Sized>(shape: Vec<usize>, limit: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.random_range(-limit..limit)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// He-uniform, for layers followed by a ReLU.
pub fn he_uniform<T: Real, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

/// Xavier/Glorot-uniform, for linear output layers.
pub fn xavier_uniform<T: Real, R: Rng + ?Sized>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}
