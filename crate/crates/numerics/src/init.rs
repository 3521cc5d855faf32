//! Parameter initialisers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{numel, Real, Tensor};

/// Glorot-uniform weights for a `fan_in → fan_out` map.
pub fn xavier_uniform<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..numel(shape))
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

pub fn normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let data = (0..numel(shape))
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v * std)
        })
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}
