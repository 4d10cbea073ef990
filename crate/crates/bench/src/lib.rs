//! Fixtures shared by the benchmarks in `benches/`.

use eos_core::{Batch, Targets};
use ndarray::Array2;

/// A deterministic stand-in for a normalized fMNIST batch: `samples` rows of
/// 784 pseudo-random pixels with balanced labels.
pub fn synthetic_batch(samples: usize, seed: u64) -> Batch {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let inputs = Array2::from_shape_fn((samples, 784), |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    });
    let labels = (0..samples).map(|i| i % 10).collect();
    Batch::new(inputs, Targets::Labels(labels)).expect("shapes agree")
}
