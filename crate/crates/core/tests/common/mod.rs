#![allow(dead_code)]

use dpiqa::dataset::PreprocessedImage;
use dpiqa::training::Samples;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` images of side `size` whose normalised score is `i / (n - 1)`.
/// Quality shows up as less additive noise and a brighter, smoother base.
pub fn synthetic_samples(n: usize, size: usize, seed: u64) -> Samples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let q = i as f64 / (n - 1).max(1) as f64;
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mut px = Vec::with_capacity(size * size * 3);
        for r in 0..size {
            for c in 0..size {
                let base = ((r as f64 * 0.05 + phase).sin() * (c as f64 * 0.04).cos()) * 0.4;
                for ch in 0..3 {
                    let noise: f64 = rng.random_range(-1.0..1.0);
                    let v = base + (q - 0.5) * 0.6 + noise * (1.0 - q) * 0.8 + ch as f64 * 0.05;
                    px.push(v.clamp(-1.0, 1.0) as f32);
                }
            }
        }
        images.push(PreprocessedImage::from_pixels(size, px).unwrap());
        scores.push(q);
    }
    Samples::new(images, scores).unwrap()
}
