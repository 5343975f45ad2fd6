//! Eigenface decoder: maps a k-dimensional latent to a face image.

use rayon::prelude::*;

use crate::data::{Gallery, Split};
use crate::error::{Error, Result};
use crate::numerics::{pca_fit, Pca};
use crate::types::{FaceImage, LatentVector};

/// Linear latent-to-image decoder over a PCA of training faces.
///
/// Latent coordinate i is scaled by `s_i/√n`, the per-component standard
/// deviation of the training set, so a standard-normal latent yields images
/// with training-distribution variance.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenfaceDecoder {
    width: usize,
    height: usize,
    pca: Pca,
    scales: Vec<f64>,
    /// Per training image: max-abs pixel error of its k-component
    /// reconstruction.
    residuals: Vec<f64>,
}

impl EigenfaceDecoder {
    /// Fits the decoder on `images`, which must share dimensions and number
    /// at least k+1.
    pub fn train(images: &[&FaceImage], k: usize) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::structural("decoder training needs images"))?;
        if images.len() < k + 1 {
            return Err(Error::structural(format!(
                "decoder with k={k} needs at least {} images, got {}",
                k + 1,
                images.len()
            )));
        }
        let (width, height) = first.dims();
        if let Some(bad) = images.iter().find(|i| i.dims() != (width, height)) {
            return Err(Error::structural(format!(
                "mixed image dimensions: {}x{} and {}x{}",
                width,
                height,
                bad.width(),
                bad.height()
            )));
        }
        let samples: Vec<Vec<f64>> = images.iter().map(|i| i.pixels().to_vec()).collect();
        let pca = pca_fit(&samples, k)?;
        let residuals = samples
            .iter()
            .map(|x| {
                let r = pca.reconstruct(&pca.project(x)?)?;
                Ok(x.iter()
                    .zip(&r)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max))
            })
            .collect::<Result<Vec<f64>>>()?;
        Self::from_parts(width, height, pca, residuals)
    }

    /// Reassembles a decoder from stored parts.
    pub fn from_parts(width: usize, height: usize, pca: Pca, residuals: Vec<f64>) -> Result<Self> {
        if pca.dim() != width * height {
            return Err(Error::structural(format!(
                "decoder mean has length {}, expected {width}x{height}",
                pca.dim()
            )));
        }
        if pca.n_samples() == 0 {
            return Err(Error::structural("decoder sample count is zero"));
        }
        let root_n = (pca.n_samples() as f64).sqrt();
        let scales = pca.singular_values().iter().map(|s| s / root_n).collect();
        Ok(EigenfaceDecoder {
            width,
            height,
            pca,
            scales,
            residuals,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.pca.k()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pca(&self) -> &Pca {
        &self.pca
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    /// Per-coordinate latent scale `s_i/√n`.
    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// The image before clamping.
    pub fn decode_raw(&self, z: &LatentVector) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim() {
            return Err(Error::structural(format!(
                "latent has length {}, decoder expects {}",
                z.len(),
                self.latent_dim()
            )));
        }
        let y: Vec<f64> = z
            .as_slice()
            .iter()
            .zip(&self.scales)
            .map(|(a, s)| a * s)
            .collect();
        self.pca.reconstruct(&y)
    }

    pub fn generate(&self, z: &LatentVector) -> Result<FaceImage> {
        FaceImage::from_clamped(self.width, self.height, self.decode_raw(z)?)
    }

    /// Element-wise [`generate`](Self::generate), computed in parallel, order
    /// preserved.
    pub fn batch_generate(&self, zs: &[LatentVector]) -> Result<Vec<FaceImage>> {
        zs.par_iter().map(|z| self.generate(z)).collect()
    }

    /// The latent whose decoding is the image's k-component reconstruction.
    /// Coordinates with zero scale map to 0.
    pub fn encode(&self, image: &FaceImage) -> Result<LatentVector> {
        if image.dims() != (self.width, self.height) {
            return Err(Error::structural(format!(
                "image is {}x{}, decoder expects {}x{}",
                image.width(),
                image.height(),
                self.width,
                self.height
            )));
        }
        let y = self.pca.project(image.pixels())?;
        LatentVector::new(
            y.iter()
                .zip(&self.scales)
                .map(|(v, s)| if *s > 0.0 { v / s } else { 0.0 })
                .collect(),
        )
    }
}

/// Trains a decoder on every world-split image of the gallery.
pub fn train_decoder(gallery: &Gallery, k: usize) -> Result<EigenfaceDecoder> {
    EigenfaceDecoder::train(&gallery.images(Split::World), k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images() -> Vec<FaceImage> {
        (0..6)
            .map(|i| {
                let px = (0..16)
                    .map(|p| 0.5 + 0.3 * ((p * (i + 1)) as f64 * 0.37).sin())
                    .collect();
                FaceImage::from_clamped(4, 4, px).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_latent_is_clamped_mean() {
        let imgs = images();
        let refs: Vec<&FaceImage> = imgs.iter().collect();
        let d = EigenfaceDecoder::train(&refs, 3).unwrap();
        let out = d.generate(&LatentVector::zeros(3)).unwrap();
        let want: Vec<f64> = d.pca().mean().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        assert_eq!(out.pixels(), &want[..]);
    }

    #[test]
    fn two_images_span_their_line() {
        let a = FaceImage::filled(2, 2, 0.2).unwrap();
        let b = FaceImage::new(2, 2, vec![0.8, 0.2, 0.6, 0.4]).unwrap();
        let d = EigenfaceDecoder::train(&[&a, &b], 1).unwrap();
        for img in [&a, &b] {
            let back = d.generate(&d.encode(img).unwrap()).unwrap();
            for (x, y) in back.pixels().iter().zip(img.pixels()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let imgs = images();
        let refs: Vec<&FaceImage> = imgs.iter().collect();
        assert!(EigenfaceDecoder::train(&refs[..3], 3).is_err());
        let odd = FaceImage::filled(2, 8, 0.5).unwrap();
        let mut mixed = refs.clone();
        mixed.push(&odd);
        assert!(EigenfaceDecoder::train(&mixed, 2).is_err());
        let d = EigenfaceDecoder::train(&refs, 2).unwrap();
        assert!(d.generate(&LatentVector::zeros(3)).is_err());
    }

    #[test]
    fn huge_latents_stay_in_range() {
        let imgs = images();
        let refs: Vec<&FaceImage> = imgs.iter().collect();
        let d = EigenfaceDecoder::train(&refs, 3).unwrap();
        let z = LatentVector::new(vec![1e6, -1e6, 3e5]).unwrap();
        assert!(d
            .generate(&z)
            .unwrap()
            .pixels()
            .iter()
            .all(|p| (0.0..=1.0).contains(p)));
        assert!(d.batch_generate(&[]).unwrap().is_empty());
    }
}
