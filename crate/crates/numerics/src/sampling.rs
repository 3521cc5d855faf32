//! Seeded Gaussian draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{broadcast_shape, numel, Real, Tensor};

/// SplitMix64 finaliser; derives independent stream seeds from a base seed.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal tensor. Draws are made in f64 and rounded, so both
/// precisions see the same noise for a given seed.
pub fn standard_normal<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut r = rng(seed);
    let data = (0..numel(shape))
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut r);
            T::lit(v)
        })
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Reparameterised draw `mu + sigma ⊙ η` with η standard normal. Gradients
/// flow to `mu` and `sigma`; η is a constant of the graph.
pub fn seeded_gaussian<T: Real>(g: &mut Graph<T>, mu: Var, sigma: Var, seed: u64) -> Result<Var> {
    if g.value(sigma).data().iter().any(|&s| s < T::zero()) {
        return Err(NumericsError::InvalidArgument(
            "gaussian scale must be non-negative".into(),
        ));
    }
    let shape = broadcast_shape(g.shape(mu), g.shape(sigma))?;
    let eta = g.constant(standard_normal(&shape, seed));
    let scaled = g.mul(sigma, eta)?;
    g.add(mu, scaled)
}

/// Plain-tensor version of [`seeded_gaussian`].
pub fn gaussian_tensor<T: Real>(mu: &Tensor<T>, sigma: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let m = g.constant(mu.clone());
    let s = g.constant(sigma.clone());
    let out = seeded_gaussian(&mut g, m, s, seed)?;
    Ok(g.value(out).clone())
}
