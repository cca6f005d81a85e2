//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Glorot/Xavier uniform for a `fan_in × fan_out` weight.
pub(crate) fn xavier_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

/// Normal samples truncated at two standard deviations.
pub(crate) fn trunc_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is positive");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}
