//! Seeded random streams. Every random draw in the crate flows from a
//! [`Rng`] created here, so a single seed reproduces a whole run.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{numel, Tensor};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child stream; used to partition one seed into
/// per-purpose streams (initialization, sampling, noise).
pub fn fork(rng: &mut Rng) -> Rng {
    ChaCha8Rng::seed_from_u64(rng.random())
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let data = (0..numel(shape))
        .map(|_| std * standard_normal(rng))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn uniform_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let data = (0..numel(shape)).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data)
}
