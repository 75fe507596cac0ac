//! Shared fixtures for the criterion benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vocabflow::{Config, Image, Tensor};

/// Seeded uniform `[-1, 1)` matrix.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(&[rows, cols], data).expect("non-empty dims")
}

/// The small model size the benchmarks run at.
pub fn bench_config() -> Config {
    Config {
        model_width: 64,
        encoder_blocks: 2,
        decoder_blocks: 2,
        latent_dim: 64,
        codebook_size: 128,
        velocity_width: 256,
        ..Config::default()
    }
}

pub fn test_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..size * size * 3).map(|_| rng.random()).collect();
    Image::new(size, size, 3, data).expect("valid image")
}
