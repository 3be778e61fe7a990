//! Density maps and the `ICCD` file format.
//!
//! ```text
//! "ICCD" | version: u32 | height: u32 | width: u32 | f32 * height * width (row-major)
//! ```
//!
//! All integers and values are little-endian.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const ICCD_MAGIC: &[u8; 4] = b"ICCD";
pub const ICCD_VERSION: u32 = 1;

/// Non-negative grid whose sum is a crowd count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    ground_truth: bool,
}

impl DensityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, ground_truth: bool) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "density map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("density map value {} at cell {i}", values[i])));
        }
        if let Some(i) = values.iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!("density map value {} at cell {i} is negative", values[i])));
        }
        Ok(DensityMap { height, width, values, ground_truth })
    }

    pub fn zeros(height: usize, width: usize, ground_truth: bool) -> Self {
        DensityMap { height, width, values: vec![0.0; height * width], ground_truth }
    }

    /// Plane `n` of a `[N,1,H,W]` tensor, with negative values clamped to zero.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let (batch, c, h, w) = t.dims4()?;
        if c != 1 || n >= batch {
            return Err(Error::Shape(format!("expected plane {n} of an [N,1,H,W] tensor, got {:?}", t.shape())));
        }
        let values = t.data()[n * h * w..(n + 1) * h * w].iter().map(|v| v.as_f64().max(0.0)).collect();
        DensityMap::new(h, w, values, false)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_ground_truth(&self) -> bool {
        self.ground_truth
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Sum of all cells, i.e. the count.
    pub fn count(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(vec![1, 1, self.height, self.width], &self.values).expect("extent matches")
    }

    pub fn to_iccd_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.values.len());
        out.extend_from_slice(ICCD_MAGIC);
        out.extend_from_slice(&ICCD_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_iccd_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != ICCD_MAGIC {
            return Err(Error::Format("missing ICCD header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != ICCD_VERSION {
            return Err(Error::Format(format!("unsupported density map version {}", word(4))));
        }
        let (h, w) = (word(8) as usize, word(12) as usize);
        let expected = h.checked_mul(w).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(16));
        if expected != Some(bytes.len()) {
            return Err(Error::Format(format!("density map {h}x{w} does not match file size {}", bytes.len())));
        }
        let values = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        DensityMap::new(h, w, values, false).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save_iccd(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_iccd_bytes())?;
        Ok(())
    }

    pub fn load_iccd(path: &Path) -> Result<Self> {
        Self::from_iccd_bytes(&fs::read(path)?)
    }

    /// One CSV row per map row.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.width.max(1)) {
            let cells: Vec<String> = row.iter().map(|v| format!("{}", *v as f32)).collect();
            writeln!(s, "{}", cells.join(",")).unwrap();
        }
        s
    }
}
