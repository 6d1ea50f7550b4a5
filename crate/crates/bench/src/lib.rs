//! Inputs shared by the benchmarks.

use multiquant::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded values in `[-1, 1)`.
pub fn values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// An MNIST-shaped batch.
pub fn image_batch(n: usize) -> Tensor {
    Tensor::new(vec![n, 1, 28, 28], values(n * 784, 7)).expect("shape")
}
