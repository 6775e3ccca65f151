//! Shared fixtures for the benchmarks.

use simtpr_core::config::ExperimentConfig;
use simtpr_core::synthdata::{generate, Dataset, EnvConfig};
use simtpr_core::Tensor;

/// The default 64×128 moving-dot dataset.
pub fn dataset() -> Dataset {
    generate(&EnvConfig::default(), 1, 64, 128).expect("default environment is valid")
}

pub fn config() -> ExperimentConfig {
    ExperimentConfig::default()
}

/// Deterministic pseudo-random `[n, d]` matrix in `[-1, 1)`.
pub fn matrix(n: usize, d: usize) -> Tensor {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    Tensor::from_fn(&[n, d], |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    })
}
