//! Shared fixtures for the criterion benchmarks.

use acr_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Row-stochastic `n × n` matrix.
pub fn random_attention(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Tensor::rand_uniform(&[n, n], 0.0, 1.0, &mut rng);
    for r in 0..n {
        let s: f64 = a.row(r).iter().sum();
        for c in 0..n {
            let v = a.at2(r, c) / s;
            a.set2(r, c, v);
        }
    }
    a
}

/// Image of the shape a ViT config expects, values in `[0, 1)`.
pub fn random_image(channels: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::rand_uniform(&[channels, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}
