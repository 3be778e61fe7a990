//! From dot-annotated images to training samples.

pub mod io;
pub mod loader;
pub mod synth;

use rand::Rng;

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::model::network::OUTPUT_STRIDE;
use crate::tensor::{Scalar, Tensor};

pub use io::{load_dataset, read_image, read_points, save_dataset, write_image, write_points};
pub use loader::{epoch_batches, LoaderConfig, PrefetchLoader};
pub use synth::{generate_synthetic, image_hash, SynthConfig};

/// ImageNet channel statistics used to normalize RGB input.
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Default training crop edge.
pub const DEFAULT_CROP: usize = 256;

/// Head position: `x` is the column, `y` the row, both in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    /// `[3, H, W]` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub points: Vec<Point>,
    pub id: String,
}

impl AnnotatedImage {
    pub fn new(image: Tensor<f32>, points: Vec<Point>, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let (h, w) = match *image.shape() {
            [3, h, w] => (h, w),
            ref s => return Err(Error::Data(format!("image {id} must be [3, H, W], got {s:?}"))),
        };
        check_points(&points, h, w, &id)?;
        Ok(AnnotatedImage { image, points, id })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }
}

fn check_points(points: &[Point], h: usize, w: usize, id: &str) -> Result<()> {
    for (k, p) in points.iter().enumerate() {
        let inside = p.x.is_finite() && p.y.is_finite() && p.x >= 0.0 && p.y >= 0.0 && p.x < w as f64 && p.y < h as f64;
        if !inside {
            return Err(Error::Data(format!(
                "{id}: point {k} at ({}, {}) lies outside the {w}x{h} image",
                p.x, p.y
            )));
        }
    }
    Ok(())
}

/// Ground-truth map with one unit per point at `(⌊y⌋, ⌊x⌋)`; coinciding
/// points accumulate so the sum always equals the point count.
pub fn rasterize(points: &[Point], height: usize, width: usize, id: &str) -> Result<DensityMap> {
    check_points(points, height, width, id)?;
    let mut map = DensityMap::zeros(height, width, true);
    for p in points {
        map.values_mut()[p.y.floor() as usize * width + p.x.floor() as usize] += 1.0;
    }
    Ok(map)
}

/// Non-overlapping `factor × factor` sum pooling, zero-padded at ragged edges.
pub fn sum_pool(map: &DensityMap, factor: usize) -> DensityMap {
    let (h, w) = (map.height(), map.width());
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut out = DensityMap::zeros(oh, ow, map.is_ground_truth());
    for r in 0..h {
        for c in 0..w {
            out.values_mut()[(r / factor) * ow + c / factor] += map.get(r, c);
        }
    }
    out
}

pub fn downsample_by_8(map: &DensityMap) -> DensityMap {
    sum_pool(map, OUTPUT_STRIDE)
}

/// A training crop and its stride-8 target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, hc, wc]`, not yet normalized.
    pub input: Tensor<f32>,
    pub target: DensityMap,
    pub id: String,
    /// `(row, col)` of the crop's top-left corner.
    pub offset: (usize, usize),
}

/// Crop at a fixed offset.
pub fn crop_at(img: &AnnotatedImage, top: usize, left: usize, hc: usize, wc: usize) -> Result<Sample> {
    let (h, w) = (img.height(), img.width());
    if hc % OUTPUT_STRIDE != 0 || wc % OUTPUT_STRIDE != 0 || hc == 0 || wc == 0 {
        return Err(Error::InvalidArgument(format!("crop {hc}x{wc} must be a positive multiple of {OUTPUT_STRIDE}")));
    }
    if top + hc > h || left + wc > w {
        return Err(Error::Data(format!("{}: crop {hc}x{wc} at ({top}, {left}) exceeds the {h}x{w} image", img.id)));
    }
    let mut input = Tensor::zeros(vec![3, hc, wc]);
    for c in 0..3 {
        for r in 0..hc {
            let src = &img.image.data()[(c * h + top + r) * w + left..(c * h + top + r) * w + left + wc];
            input.data_mut()[(c * hc + r) * wc..(c * hc + r + 1) * wc].copy_from_slice(src);
        }
    }
    let (t, l) = (top as f64, left as f64);
    let inside: Vec<Point> = img
        .points
        .iter()
        .filter(|p| p.y >= t && p.y < t + hc as f64 && p.x >= l && p.x < l + wc as f64)
        .map(|p| Point { x: p.x - l, y: p.y - t })
        .collect();
    let target = downsample_by_8(&rasterize(&inside, hc, wc, &img.id)?);
    Ok(Sample { input, target, id: img.id.clone(), offset: (top, left) })
}

/// Uniformly placed `hc × wc` crop.
pub fn random_crop<R: Rng + ?Sized>(img: &AnnotatedImage, hc: usize, wc: usize, rng: &mut R) -> Result<Sample> {
    if hc > img.height() || wc > img.width() {
        return Err(Error::Data(format!(
            "{}: crop {hc}x{wc} is larger than the {}x{} image",
            img.id,
            img.height(),
            img.width()
        )));
    }
    let top = rng.random_range(0..=img.height() - hc);
    let left = rng.random_range(0..=img.width() - wc);
    crop_at(img, top, left, hc, wc)
}

/// `(v − mean) / std` per channel of a `[3, H, W]` or `[N, 3, H, W]` tensor.
pub fn normalize<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    per_channel(image, |v, c| (v - CHANNEL_MEAN[c]) / CHANNEL_STD[c])
}

pub fn denormalize<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    per_channel(image, |v, c| v * CHANNEL_STD[c] + CHANNEL_MEAN[c])
}

fn per_channel<T: Scalar>(image: &Tensor<T>, f: impl Fn(f64, usize) -> f64) -> Result<Tensor<T>> {
    let (n, hw) = match *image.shape() {
        [3, h, w] => (1, h * w),
        [n, 3, h, w] => (n, h * w),
        ref s => return Err(Error::Shape(format!("expected 3 colour channels, got shape {s:?}"))),
    };
    let mut out = image.clone();
    for b in 0..n {
        for c in 0..3 {
            for v in &mut out.data_mut()[(b * 3 + c) * hw..(b * 3 + c + 1) * hw] {
                *v = T::from_f64_lossy(f(v.as_f64(), c));
            }
        }
    }
    Ok(out)
}

/// Gaussian blur of a density map for display. The kernel is truncated at
/// 3σ and renormalized, so interior mass is preserved.
pub fn gaussian_smooth(map: &DensityMap, sigma: f64) -> DensityMap {
    let radius = (3.0 * sigma).ceil().max(0.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (map.height() as isize, map.width() as isize);
    let mut tmp = vec![0.0; (h * w) as usize];
    for r in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for (k, d) in (-radius..=radius).enumerate() {
                let cc = c + d;
                if (0..w).contains(&cc) {
                    s += kernel[k] * map.get(r as usize, cc as usize);
                }
            }
            tmp[(r * w + c) as usize] = s;
        }
    }
    let mut out = DensityMap::zeros(map.height(), map.width(), false);
    for r in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for (k, d) in (-radius..=radius).enumerate() {
                let rr = r + d;
                if (0..h).contains(&rr) {
                    s += kernel[k] * tmp[(rr * w + c) as usize];
                }
            }
            out.values_mut()[(r * w + c) as usize] = s;
        }
    }
    out
}
