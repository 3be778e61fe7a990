//! Synthetic crowds: bright Gaussian "heads" on a textured background.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{AnnotatedImage, Point};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    /// Inclusive head-count range.
    pub count_range: (usize, usize),
    pub height: usize,
    pub width: usize,
    pub n_images: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { count_range: (5, 50), height: 256, width: 256, n_images: 64, seed: 0 }
    }
}

/// Image `index` depends only on `(seed, index)`, so datasets with the same
/// seed share their prefix.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<AnnotatedImage>> {
    let (lo, hi) = config.count_range;
    if lo > hi {
        return Err(Error::Config(format!("count range {lo}..={hi} is empty")));
    }
    if config.height == 0 || config.width == 0 {
        return Err(Error::Config("synthetic images need positive extents".into()));
    }
    (0..config.n_images).map(|i| synth_image(config, i)).collect()
}

fn synth_image(config: &SynthConfig, index: usize) -> Result<AnnotatedImage> {
    let (h, w) = (config.height, config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    let mut img = vec![0.0f64; 3 * h * w];

    let base: f64 = rng.random_range(0.2..0.4);
    for c in 0..3 {
        let tint: f64 = rng.random_range(-0.05..0.05);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let fy: f64 = rng.random_range(0.5..4.0) / h as f64;
                let fx: f64 = rng.random_range(0.5..4.0) / w as f64;
                (fy, fx, rng.random_range(0.0..2.0 * PI), rng.random_range(0.02..0.06))
            })
            .collect();
        for r in 0..h {
            for col in 0..w {
                let mut v = base + tint;
                for &(fy, fx, phase, amp) in &waves {
                    v += amp * (2.0 * PI * (fy * r as f64 + fx * col as f64) + phase).sin();
                }
                img[(c * h + r) * w + col] = v + noise.sample(&mut rng);
            }
        }
    }

    let count = rng.random_range(config.count_range.0..=config.count_range.1);
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let p = Point { x: rng.random_range(0.0..w as f64), y: rng.random_range(0.0..h as f64) };
        let sigma: f64 = rng.random_range(2.0..3.5);
        let amp: f64 = rng.random_range(0.4..0.6);
        let colour: [f64; 3] = [rng.random_range(0.8..1.0), rng.random_range(0.6..0.9), rng.random_range(0.5..0.8)];
        let reach = (4.0 * sigma).ceil() as isize;
        let (cy, cx) = (p.y.floor() as isize, p.x.floor() as isize);
        for r in (cy - reach).max(0)..(cy + reach + 1).min(h as isize) {
            for col in (cx - reach).max(0)..(cx + reach + 1).min(w as isize) {
                let dy = r as f64 + 0.5 - p.y;
                let dx = col as f64 + 0.5 - p.x;
                let g = amp * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                for (c, tone) in colour.iter().enumerate() {
                    img[(c * h + r as usize) * w + col as usize] += g * tone;
                }
            }
        }
        points.push(p);
    }

    let data = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    let image = Tensor::from_vec(vec![3, h, w], data)?;
    AnnotatedImage::new(image, points, format!("synth_{}_{index:04}", config.seed))
}

/// SHA-256 of the image as 8-bit samples, in hex.
pub fn image_hash(image: &Tensor<f32>) -> String {
    let bytes: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}
