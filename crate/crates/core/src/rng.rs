//! Seeded randomness shared by every stochastic component.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};

use crate::autodiff::Tensor;

pub type Rng64 = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a base seed and a label.
pub fn derive(seed: u64, stream: u64) -> Rng64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn normal_tensor(rng: &mut Rng64, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(dist)).collect())
        .expect("shape matches data")
}

/// Xavier/Glorot uniform for a `fan_in × fan_out` matrix.
pub fn xavier_uniform(rng: &mut Rng64, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

pub fn standard_normal(rng: &mut Rng64) -> f64 {
    rng.sample(StandardNormal)
}
