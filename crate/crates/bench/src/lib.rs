//! Fixtures shared by the kernel benchmarks.

use oreo_core::envsim::EnvConfig;
use oreo_core::nn::Tensor;
use rand::Rng as _;
use rand_chacha::rand_core::SeedableRng;

pub fn random_images(n: usize, size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor { shape: vec![n, 1, size, size], data }
}

pub fn desk_env() -> EnvConfig {
    oreo_core::RunConfig::default().env
}
