//! Whole-image evaluation and single-image inference.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::data::io::read_image;
use crate::data::{normalize, AnnotatedImage};
use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops::resize_bilinear;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageResult {
    pub id: String,
    pub truth: f64,
    pub predicted: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub per_image: Vec<ImageResult>,
    pub mae: f64,
    pub rmse: f64,
}

impl EvalResult {
    /// Aggregates per-image counts into MAE and RMSE.
    pub fn from_results(per_image: Vec<ImageResult>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Data("cannot evaluate an empty dataset".into()));
        }
        let n = per_image.len() as f64;
        let mae = per_image.iter().map(|r| (r.truth - r.predicted).abs()).sum::<f64>() / n;
        let rmse = (per_image.iter().map(|r| (r.truth - r.predicted).powi(2)).sum::<f64>() / n).sqrt();
        Ok(EvalResult { per_image, mae, rmse })
    }

    pub fn from_counts(truth: &[f64], predicted: &[f64]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::InvalidArgument(format!(
                "{} true counts but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let rows = truth
            .iter()
            .zip(predicted)
            .enumerate()
            .map(|(i, (&t, &p))| ImageResult { id: i.to_string(), truth: t, predicted: p, seconds: 0.0 })
            .collect();
        Self::from_results(rows)
    }
}

/// Stride-8 density map of one `[3, H, W]` image with values in `[0, 1]`.
pub fn predict_density<T: Scalar>(model: &Model<T>, image: &Tensor<f32>) -> Result<DensityMap> {
    let x = normalize(&image.cast::<T>())?;
    let shape = x.shape().to_vec();
    let out = model.predict(&x.reshape([vec![1], shape].concat())?)?;
    out.ensure_finite("prediction")?;
    DensityMap::from_tensor(&out, 0)
}

/// Predicted count of every image at full size.
pub fn evaluate<T: Scalar>(model: &Model<T>, images: &[AnnotatedImage]) -> Result<EvalResult> {
    let rows = images
        .iter()
        .map(|img| {
            let start = Instant::now();
            let predicted = predict_density(model, &img.image)?.count();
            Ok(ImageResult {
                id: img.id.clone(),
                truth: img.count() as f64,
                predicted,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_results(rows)
}

/// Predicts `constant` for every image.
pub fn constant_baseline(constant: f64, images: &[AnnotatedImage]) -> Result<EvalResult> {
    let rows = images
        .iter()
        .map(|img| ImageResult { id: img.id.clone(), truth: img.count() as f64, predicted: constant, seconds: 0.0 })
        .collect();
    EvalResult::from_results(rows)
}

/// Bilinear resize to `height × width`, rescaled so the count is unchanged.
pub fn upsample_density(map: &DensityMap, height: usize, width: usize) -> Result<DensityMap> {
    let t = map.to_tensor::<f64>().reshape([1, 1, map.height(), map.width()])?;
    let up = resize_bilinear(&t, height, width)?;
    let mut out = DensityMap::from_tensor(&up, 0)?;
    let (before, after) = (map.count(), out.count());
    if after > 0.0 {
        let scale = before / after;
        out.values_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok(out)
}

/// Predicts the density of the image at `image_path` and writes it to
/// `out_path`, at stride 8 or at full resolution.
pub fn infer<T: Scalar>(model: &Model<T>, image_path: &Path, out_path: &Path, upsample: bool) -> Result<DensityMap> {
    let image = read_image(image_path)?;
    let mut map = predict_density(model, &image)?;
    if upsample {
        map = upsample_density(&map, image.shape()[1], image.shape()[2])?;
    }
    map.save_iccd(out_path)?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig { width_multiplier: 0.125, decoder_channels: vec![16, 8, 8], ..ModelConfig::default() }
    }

    #[test]
    fn metric_arithmetic() {
        let r = EvalResult::from_counts(&[10.0, 20.0], &[12.0, 16.0]).unwrap();
        assert!((r.mae - 3.0).abs() < 1e-12);
        assert!((r.rmse - 10f64.sqrt()).abs() < 1e-12);
        let perfect = EvalResult::from_counts(&[3.0, 4.0], &[3.0, 4.0]).unwrap();
        assert_eq!((perfect.mae, perfect.rmse), (0.0, 0.0));
    }

    #[test]
    fn constant_mean_rmse_is_population_std() {
        let z = [4.0, 9.0, 15.0, 22.0, 7.0];
        let mean = z.iter().sum::<f64>() / 5.0;
        let r = EvalResult::from_counts(&z, &[mean; 5]).unwrap();
        let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
        assert!((r.rmse - std).abs() < 1e-12);
        assert!(r.mae <= r.rmse);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(EvalResult::from_counts(&[], &[]), Err(Error::Data(_))));
        assert!(EvalResult::from_counts(&[1.0], &[]).is_err());
    }

    #[test]
    fn upsampling_preserves_count() {
        let values: Vec<f64> = (0..12).map(|i| (i * 7 % 5) as f64 * 0.3).collect();
        let map = DensityMap::new(3, 4, values, false).unwrap();
        let up = upsample_density(&map, 21, 30).unwrap();
        assert_eq!((up.height(), up.width()), (21, 30));
        assert!((up.count() - map.count()).abs() <= 1e-3 * map.count());
    }

    #[test]
    fn zeroed_final_layer_predicts_nothing() {
        let mut model = Model::<f64>::new(tiny()).unwrap();
        for (name, p) in model.params.params.iter_mut() {
            if name.starts_with("decoder.") {
                p.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let black = Tensor::<f32>::zeros(vec![3, 40, 56]);
        let map = predict_density(&model, &black).unwrap();
        assert_eq!((map.height(), map.width()), (5, 7));
        assert_eq!(map.count(), 0.0);
    }

    #[test]
    fn infer_writes_readable_map() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::new(tiny()).unwrap();
        let img = Tensor::<f32>::full(vec![3, 64, 48], 0.5);
        let src = dir.path().join("a.ppm");
        crate::data::io::write_image(&src, &img).unwrap();
        for upsample in [false, true] {
            let out = dir.path().join("a.iccd");
            let map = infer(&model, &src, &out, upsample).unwrap();
            let back = DensityMap::load_iccd(&out).unwrap();
            assert_eq!(back.to_iccd_bytes(), map.to_iccd_bytes());
            let dims = if upsample { (64, 48) } else { (8, 6) };
            assert_eq!((back.height(), back.width()), dims);
        }
        assert!(matches!(infer(&model, &dir.path().join("missing.ppm"), &dir.path().join("x"), false), Err(Error::Data(_))));
    }

    #[test]
    fn evaluation_is_repeatable() {
        let model = Model::<f32>::new(tiny()).unwrap();
        let imgs = crate::data::synth::generate_synthetic(&crate::data::synth::SynthConfig {
            count_range: (1, 5),
            height: 40,
            width: 72,
            n_images: 2,
            seed: 4,
        })
        .unwrap();
        let a = evaluate(&model, &imgs).unwrap();
        let b = evaluate(&model, &imgs).unwrap();
        assert_eq!(a.per_image.iter().map(|r| r.predicted).collect::<Vec<_>>(), b.per_image.iter().map(|r| r.predicted).collect::<Vec<_>>());
        assert!(a.mae <= a.rmse);
    }
}
