//! Seeded Gaussian tensor generation.
//!
//! Every consumer draws from its own ChaCha stream so adding a layer or a step
//! never perturbs the values drawn for another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub struct SeedStream {
    rng: ChaCha8Rng,
}

impl SeedStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        SeedStream { rng }
    }

    /// Standard normal samples.
    pub fn normal(&mut self, shape: &[usize]) -> Tensor {
        self.normal_scaled(shape, 1.0)
    }

    pub fn normal_scaled(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("gaussian samples are finite")
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        use rand::Rng;
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("uniform samples are finite")
    }
}
