//! Input builders shared by the benchmarks.

use morphreg_core::network::{ModelConfig, Variant};
use morphreg_core::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0) as Real).collect()).expect("shape matches data")
}

/// Smooth positive volume `[1, n, n, n]`.
pub fn smooth(n: usize, phase: f64) -> Tensor {
    let mut data = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let v = (x as f64 * 0.3 + phase).sin() * (y as f64 * 0.2).cos() + (z as f64 * 0.15).sin();
                data.push((0.5 + 0.25 * v) as Real);
            }
        }
    }
    Tensor::new(&[1, n, n, n], data).expect("shape matches data")
}

/// Small model on a 32³ grid for end-to-end timings.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        input_dims: [32; 3],
        ..ModelConfig::variant(Variant::S)
    }
}
