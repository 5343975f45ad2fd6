//! Value types shared across the pipeline.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A point in the generator's latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::structural("latent vector has non-finite entries"));
        }
        Ok(LatentVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        LatentVector(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for LatentVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Grayscale raster, row-major, intensities in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl FaceImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::structural("image dimensions must be non-zero"));
        }
        if pixels.len() != width * height {
            return Err(Error::structural(format!(
                "image has {} pixels, expected {width}x{height}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::structural(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(FaceImage {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image by clamping every value into [0, 1]. NaN maps to 0.
    pub fn from_clamped(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let pixels = values
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        FaceImage::new(width, height, pixels)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        FaceImage::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// SHA-256 over the little-endian pixel bytes, hex encoded.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.width as u64).to_le_bytes());
        hasher.update((self.height as u64).to_le_bytes());
        for p in &self.pixels {
            hasher.update(p.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}
