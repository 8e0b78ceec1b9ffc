//! Inputs shared by the kernel benchmarks.

use evax_core::{Rng, Tensor};

/// Standard-normal tensor of the given shape.
pub fn randn(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape matches data")
}

/// Scores and binary labels for ranking-metric benchmarks.
pub fn scored_labels(seed: u64, n: usize) -> (Vec<f32>, Vec<bool>) {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| (rng.normal(), rng.bernoulli(0.3))).unzip()
}
