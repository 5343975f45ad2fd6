//! Surrogate face matcher: PCA embedding, cosine similarity and EER
//! threshold calibration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Gallery, Split};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, pca_fit, Pca};
use crate::types::FaceImage;

/// Fixed preprocessing applied to an image before the embedding PCA.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    /// Raw pixels.
    #[default]
    Identity,
    /// Mean over 2×2 pixel blocks; edge blocks average what is present.
    #[serde(rename = "block_average_2x2")]
    BlockAverage2x2,
}

impl FeatureMap {
    pub fn output_len(self, width: usize, height: usize) -> usize {
        match self {
            FeatureMap::Identity => width * height,
            FeatureMap::BlockAverage2x2 => width.div_ceil(2) * height.div_ceil(2),
        }
    }

    pub fn apply(self, image: &FaceImage) -> Vec<f64> {
        match self {
            FeatureMap::Identity => image.pixels().to_vec(),
            FeatureMap::BlockAverage2x2 => {
                let (w, h) = image.dims();
                let mut out = Vec::with_capacity(self.output_len(w, h));
                for by in (0..h).step_by(2) {
                    for bx in (0..w).step_by(2) {
                        let mut sum = 0.0;
                        let mut count = 0.0;
                        for y in by..(by + 2).min(h) {
                            for x in bx..(bx + 2).min(w) {
                                sum += image.pixel(x, y);
                                count += 1.0;
                            }
                        }
                        out.push(sum / count);
                    }
                }
                out
            }
        }
    }
}

/// PCA embedding over feature-mapped images.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModel {
    tag: String,
    feature_map: FeatureMap,
    width: usize,
    height: usize,
    pca: Pca,
}

impl EmbeddingModel {
    /// Fits an `e`-dimensional embedding on `images` (at least e+1, uniform
    /// dimensions). Deterministic in image order.
    pub fn train(
        images: &[&FaceImage],
        e: usize,
        feature_map: FeatureMap,
        tag: &str,
    ) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::structural("matcher training needs images"))?;
        if images.len() < e + 1 {
            return Err(Error::structural(format!(
                "matcher with e={e} needs at least {} images, got {}",
                e + 1,
                images.len()
            )));
        }
        let (width, height) = first.dims();
        if images.iter().any(|i| i.dims() != (width, height)) {
            return Err(Error::structural(
                "matcher training images have mixed dimensions",
            ));
        }
        let samples: Vec<Vec<f64>> = images.iter().map(|i| feature_map.apply(i)).collect();
        let pca = pca_fit(&samples, e)?;
        Self::from_parts(tag, feature_map, width, height, pca)
    }

    pub fn from_parts(
        tag: &str,
        feature_map: FeatureMap,
        width: usize,
        height: usize,
        pca: Pca,
    ) -> Result<Self> {
        if pca.dim() != feature_map.output_len(width, height) {
            return Err(Error::structural(format!(
                "matcher pca dimension {} does not fit {width}x{height} images under {feature_map:?}",
                pca.dim()
            )));
        }
        Ok(EmbeddingModel {
            tag: tag.to_string(),
            feature_map,
            width,
            height,
            pca,
        })
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn feature_map(&self) -> FeatureMap {
        self.feature_map
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Embedding dimension e.
    pub fn dim(&self) -> usize {
        self.pca.k()
    }

    pub fn pca(&self) -> &Pca {
        &self.pca
    }

    pub fn embed(&self, image: &FaceImage) -> Result<Vec<f64>> {
        if image.dims() != (self.width, self.height) {
            return Err(Error::structural(format!(
                "image is {}x{}, matcher `{}` expects {}x{}",
                image.width(),
                image.height(),
                self.tag,
                self.width,
                self.height
            )));
        }
        self.pca.project(&self.feature_map.apply(image))
    }

    pub fn face_matching(&self, a: &FaceImage, b: &FaceImage) -> Result<MatchScore> {
        Ok(cosine(&self.embed(a)?, &self.embed(b)?))
    }
}

/// Trains a matcher on every image of one gallery split.
pub fn train_matcher(
    gallery: &Gallery,
    split: Split,
    e: usize,
    feature_map: FeatureMap,
    tag: &str,
) -> Result<EmbeddingModel> {
    EmbeddingModel::train(&gallery.images(split), e, feature_map, tag)
}

/// A similarity score in [−1, 1]. `degenerate` marks a zero-norm embedding,
/// for which the score is defined as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub score: f64,
    pub degenerate: bool,
}

pub fn cosine(a: &[f64], b: &[f64]) -> MatchScore {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        return MatchScore {
            score: 0.0,
            degenerate: true,
        };
    }
    MatchScore {
        score: (dot(a, b) / denom).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Scores of all genuine pairs (same identity, distinct images) and all
/// zero-effort imposter pairs (different identities) within a split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub genuine: Vec<f64>,
    pub imposter: Vec<f64>,
}

pub fn pair_scores(model: &EmbeddingModel, gallery: &Gallery, split: Split) -> Result<PairScores> {
    let entries: Vec<_> = gallery.split_entries(split).collect();
    let embeddings = entries
        .par_iter()
        .map(|e| model.embed(&e.image))
        .collect::<Result<Vec<_>>>()?;
    let mut out = PairScores::default();
    for i in 0..entries.len() {
        for j in i + 1..entries.len() {
            let s = cosine(&embeddings[i], &embeddings[j]).score;
            if entries[i].identity == entries[j].identity {
                out.genuine.push(s);
            } else {
                out.imposter.push(s);
            }
        }
    }
    Ok(out)
}

/// Operating threshold of a matcher: accept iff score ≥ `tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionThreshold {
    pub tau: f64,
    pub eer: f64,
    /// Tag of the matcher the threshold belongs to.
    pub model_tag: String,
    /// Which data set the threshold was calibrated on.
    pub calibration_tag: String,
}

/// Equal-error operating point of two score populations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub tau: f64,
    pub eer: f64,
}

/// False accept rate: imposter scores ≥ t.
pub fn far(imposter_sorted: &[f64], t: f64) -> f64 {
    let below = imposter_sorted.partition_point(|&s| s < t);
    (imposter_sorted.len() - below) as f64 / imposter_sorted.len() as f64
}

/// False reject rate: genuine scores < t.
pub fn frr(genuine_sorted: &[f64], t: f64) -> f64 {
    genuine_sorted.partition_point(|&s| s < t) as f64 / genuine_sorted.len() as f64
}

/// Locates the FAR = FRR crossing.
///
/// Candidate thresholds are the distinct observed scores, ascending. The first
/// one where FAR ≤ FRR closes a bracket with its predecessor, and the crossing
/// is linearly interpolated inside it. When the empirical rates are exactly
/// equal there (e.g. separated populations) the midpoint of the bracket is
/// used, which for separated populations is the middle of the gap.
pub fn eer_from_scores(genuine: &[f64], imposter: &[f64]) -> Result<EerPoint> {
    if genuine.is_empty() {
        return Err(Error::structural("no genuine pairs to calibrate on"));
    }
    if imposter.is_empty() {
        return Err(Error::structural("no imposter pairs to calibrate on"));
    }
    if genuine.iter().chain(imposter).any(|s| !s.is_finite()) {
        return Err(Error::structural("non-finite score in calibration set"));
    }
    let mut gen = genuine.to_vec();
    let mut imp = imposter.to_vec();
    gen.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    let mut merged: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    merged.sort_by(f64::total_cmp);
    merged.dedup();

    let rates = |t: f64| (far(&imp, t), frr(&gen, t));
    let (mut prev_t, (mut prev_far, mut prev_frr)) = (merged[0], rates(merged[0]));
    for &t in &merged[1..] {
        let (fa, fr) = rates(t);
        let d = fa - fr;
        if d <= 0.0 {
            if d == 0.0 {
                return Ok(EerPoint {
                    tau: prev_t + (t - prev_t) / 2.0,
                    eer: fa,
                });
            }
            let d_prev = prev_far - prev_frr;
            let alpha = d_prev / (d_prev - d);
            let eer = prev_far + alpha * (fa - prev_far);
            return Ok(EerPoint {
                tau: prev_t + alpha * (t - prev_t),
                eer: eer.clamp(0.0, 1.0),
            });
        }
        prev_t = t;
        prev_far = fa;
        prev_frr = fr;
    }
    // Every observed threshold still accepts more imposters than it rejects
    // genuines; the crossing lies at the top score, against FAR = 0, FRR = 1
    // just above it.
    let d_prev = prev_far - prev_frr;
    let alpha = d_prev / (d_prev + 1.0);
    Ok(EerPoint {
        tau: prev_t,
        eer: (prev_far * (1.0 - alpha)).clamp(0.0, 1.0),
    })
}

/// Calibrates the EER threshold of `model` on all pairs of a gallery split.
pub fn calibrate_threshold(
    model: &EmbeddingModel,
    gallery: &Gallery,
    split: Split,
) -> Result<DecisionThreshold> {
    let ids = gallery.identities(split);
    if ids.len() < 2 {
        return Err(Error::structural(format!(
            "calibration split `{split}` needs at least 2 identities, has {}",
            ids.len()
        )));
    }
    let pairs = pair_scores(model, gallery, split)?;
    let point = eer_from_scores(&pairs.genuine, &pairs.imposter)?;
    Ok(DecisionThreshold {
        tau: point.tau,
        eer: point.eer,
        model_tag: model.tag().to_string(),
        calibration_tag: split.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_cosines() {
        let s = cosine(&[1.0, 0.0], &[1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()]);
        assert!((s.score - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).score, 0.0);
        let z = cosine(&[0.0, 0.0], &[1.0, 0.0]);
        assert_eq!((z.score, z.degenerate), (0.0, true));
    }

    #[test]
    fn separated_scores_give_gap_midpoint() {
        let p = eer_from_scores(&[0.9; 5], &[0.1; 7]).unwrap();
        assert_eq!(p.eer, 0.0);
        assert!((p.tau - 0.5).abs() < 1e-15);
    }

    #[test]
    fn needs_both_populations() {
        assert!(eer_from_scores(&[], &[0.1]).is_err());
        assert!(eer_from_scores(&[0.1], &[]).is_err());
    }

    #[test]
    fn constant_scores_are_indistinguishable() {
        let p = eer_from_scores(&[0.3; 4], &[0.3; 4]).unwrap();
        assert!((p.eer - 0.5).abs() < 1e-12);
    }

    #[test]
    fn block_average_handles_odd_edges() {
        let img = FaceImage::new(3, 1, vec![0.2, 0.4, 0.9]).unwrap();
        let f = FeatureMap::BlockAverage2x2.apply(&img);
        assert_eq!(f.len(), 2);
        assert!((f[0] - 0.3).abs() < 1e-15);
        assert_eq!(f[1], 0.9);
    }
}
