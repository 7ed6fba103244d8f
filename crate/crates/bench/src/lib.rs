//! Shared fixtures for the benchmarks.

use mmcnn_core::data::Image;
use mmcnn_core::net::BranchConfig;
use mmcnn_core::rng;
use mmcnn_core::Tensor;
use rand::Rng;

/// Uniform `[0, 1)` image of the given geometry.
pub fn random_image(channels: usize, size: usize, seed: u64) -> Image {
    let mut r = rng::stream(seed, "bench.image", 0);
    let data = (0..channels * size * size)
        .map(|_| r.random::<f32>())
        .collect();
    Image::new(channels, size, size, data).expect("non-empty geometry")
}

/// Batch of random network inputs.
pub fn random_batch(n: usize, cfg: &BranchConfig, seed: u64) -> Tensor<f32> {
    mmcnn_core::net::random_images(n, cfg, &mut rng::stream(seed, "bench.batch", 0))
}
