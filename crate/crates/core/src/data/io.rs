//! Annotation text files, images and on-disk datasets.
//!
//! A dataset directory holds `<id>.ppm` (or any other decodable image) next
//! to `<id>.pts`. Point files are UTF-8 with LF endings:
//!
//! ```text
//! ICCPTS 1
//! 12.5 40.25
//! ...
//! ```

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{AnnotatedImage, Point};

pub const POINTS_HEADER: &str = "ICCPTS 1";
pub const POINTS_EXTENSION: &str = "pts";

pub fn format_points(points: &[Point]) -> String {
    let mut s = String::from(POINTS_HEADER);
    s.push('\n');
    for p in points {
        s.push_str(&format!("{} {}\n", p.x, p.y));
    }
    s
}

pub fn parse_points(text: &str, source: &str) -> Result<Vec<Point>> {
    let mut lines = text.split('\n');
    if lines.next().map(str::trim_end) != Some(POINTS_HEADER) {
        return Err(Error::Data(format!("{source}: missing \"{POINTS_HEADER}\" header")));
    }
    let mut points = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let mut coord = || -> Result<f64> {
            parts
                .next()
                .and_then(|t| t.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Data(format!("{source}:{}: expected \"x y\", got {line:?}", n + 2)))
        };
        let (x, y) = (coord()?, coord()?);
        if parts.next().is_some() {
            return Err(Error::Data(format!("{source}:{}: trailing data in {line:?}", n + 2)));
        }
        points.push(Point { x, y });
    }
    Ok(points)
}

pub fn read_points(path: &Path) -> Result<Vec<Point>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_points(&text, &path.display().to_string())
}

pub fn write_points(path: &Path, points: &[Point]) -> Result<()> {
    fs::write(path, format_points(points))?;
    Ok(())
}

/// Decodes an image into `[3, H, W]` with values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bad = |e: &dyn std::fmt::Display| Error::Data(format!("{}: {e}", path.display()));
    let img = ImageReader::open(path)
        .map_err(|e| bad(&e))?
        .with_guessed_format()
        .map_err(|e| bad(&e))?
        .decode()
        .map_err(|e| bad(&e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for (k, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + k] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

/// Writes `[3, H, W]` values in `[0, 1]` as a binary PPM (P6).
pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::Shape(format!("image must be [3, H, W], got {s:?}"))),
    };
    let mut raw = vec![0u8; 3 * h * w];
    for k in 0..h * w {
        for c in 0..3 {
            raw[3 * k + c] = (image.data()[c * h * w + k].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let file = BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&raw, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn save_dataset(dir: &Path, images: &[AnnotatedImage]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for img in images {
        write_image(&dir.join(format!("{}.ppm", img.id)), &img.image)?;
        write_points(&dir.join(format!("{}.{POINTS_EXTENSION}", img.id)), &img.points)?;
    }
    Ok(())
}

fn image_for(dir: &Path, id: &str) -> Option<PathBuf> {
    let mut candidates: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_stem().and_then(|s| s.to_str()) == Some(id)
                && p.extension().and_then(|e| e.to_str()) != Some(POINTS_EXTENSION)
        })
        .collect();
    candidates.sort();
    candidates.into_iter().next()
}

/// All `<id>.pts` files of `dir` with their images, sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<AnnotatedImage>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(POINTS_EXTENSION))
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(String::from))
        .collect();
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let points = read_points(&dir.join(format!("{id}.{POINTS_EXTENSION}")))?;
            let path = image_for(dir, &id).ok_or_else(|| Error::Data(format!("{id}: no image next to its point file")))?;
            AnnotatedImage::new(read_image(&path)?, points, id)
        })
        .collect()
}
