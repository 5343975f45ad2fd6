//! Post-attack evaluation: FMR, score histograms, wolf attack probability,
//! transfer across matchers and the latent trajectory projection.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Gallery, Split};
use crate::error::{Error, Result};
use crate::generator::EigenfaceDecoder;
use crate::lve::{MasterFaceRecord, TemplateSet};
use crate::matcher::{pair_scores, DecisionThreshold, EmbeddingModel};
use crate::numerics::pca_fit;
use crate::types::FaceImage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedIdentity {
    pub identity: String,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl ScoreSummary {
    pub fn of(scores: &[f64]) -> Self {
        if scores.is_empty() {
            return ScoreSummary::default();
        }
        ScoreSummary {
            count: scores.len(),
            mean: Some(scores.iter().sum::<f64>() / scores.len() as f64),
            min: scores.iter().copied().reduce(f64::min),
            max: scores.iter().copied().reduce(f64::max),
        }
    }
}

/// FMR of one master face against the enrolled identities of a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_tag: String,
    pub split: Split,
    pub tau: f64,
    pub eer: f64,
    pub enrolled: usize,
    pub matched_count: usize,
    /// matched_count / enrolled.
    pub fmr: f64,
    /// Matched identities, highest score first.
    pub matched: Vec<MatchedIdentity>,
    pub genuine: ScoreSummary,
    pub imposter: ScoreSummary,
}

fn check_threshold(model: &EmbeddingModel, threshold: &DecisionThreshold) -> Result<()> {
    if threshold.model_tag != model.tag() {
        return Err(Error::structural(format!(
            "threshold was calibrated for `{}`, not `{}`",
            threshold.model_tag,
            model.tag()
        )));
    }
    Ok(())
}

/// Scores of `master` against each enrolled template of `split`, in
/// enrollment order.
pub fn enrolled_scores(
    master: &FaceImage,
    gallery: &Gallery,
    split: Split,
    model: &EmbeddingModel,
) -> Result<Vec<(String, f64)>> {
    let templates = gallery.enrolled_templates(split)?;
    let set = TemplateSet::new(model, &templates)?;
    let scores = set.scores(model, master)?;
    Ok(set
        .identities()
        .iter()
        .cloned()
        .zip(scores.iter().map(|s| s.score))
        .collect())
}

/// An identity counts as matched when its template scores ≥ tau.
pub fn compute_fmr(
    master: &FaceImage,
    gallery: &Gallery,
    split: Split,
    model: &EmbeddingModel,
    threshold: &DecisionThreshold,
) -> Result<EvalReport> {
    check_threshold(model, threshold)?;
    let scores = enrolled_scores(master, gallery, split, model)?;
    let pairs = pair_scores(model, gallery, split)?;
    let mut matched: Vec<MatchedIdentity> = scores
        .iter()
        .filter(|(_, s)| *s >= threshold.tau)
        .map(|(id, s)| MatchedIdentity {
            identity: id.clone(),
            score: *s,
        })
        .collect();
    matched.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.identity.cmp(&b.identity))
    });
    Ok(EvalReport {
        model_tag: model.tag().to_string(),
        split,
        tau: threshold.tau,
        eer: threshold.eer,
        enrolled: scores.len(),
        matched_count: matched.len(),
        fmr: matched.len() as f64 / scores.len() as f64,
        matched,
        genuine: ScoreSummary::of(&pairs.genuine),
        imposter: ScoreSummary::of(&pairs.imposter),
    })
}

/// Genuine, imposter and master-vs-enrolled score counts over uniform bins
/// on [−1, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub edges: Vec<f64>,
    pub genuine: Vec<u64>,
    pub imposter: Vec<u64>,
    pub master: Vec<u64>,
    pub genuine_mean: f64,
    pub imposter_mean: f64,
    pub master_mean: f64,
}

fn bin_of(score: f64, bins: usize) -> usize {
    let pos = ((score + 1.0) / 2.0 * bins as f64).floor();
    (pos.max(0.0) as usize).min(bins - 1)
}

fn histogram(scores: &[f64], bins: usize) -> Vec<u64> {
    let mut counts = vec![0; bins];
    for &s in scores {
        counts[bin_of(s, bins)] += 1;
    }
    counts
}

fn mean(scores: &[f64]) -> f64 {
    scores.iter().sum::<f64>() / scores.len() as f64
}

pub fn score_histograms(
    gallery: &Gallery,
    split: Split,
    model: &EmbeddingModel,
    master: &FaceImage,
    bins: usize,
) -> Result<ScoreHistogram> {
    if bins == 0 {
        return Err(Error::structural("histogram needs at least one bin"));
    }
    let pairs = pair_scores(model, gallery, split)?;
    if pairs.genuine.is_empty() || pairs.imposter.is_empty() {
        return Err(Error::structural(format!(
            "split `{split}` lacks genuine or imposter pairs"
        )));
    }
    let master_scores: Vec<f64> = enrolled_scores(master, gallery, split, model)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    Ok(ScoreHistogram {
        edges: (0..=bins)
            .map(|i| -1.0 + 2.0 * i as f64 / bins as f64)
            .collect(),
        genuine: histogram(&pairs.genuine, bins),
        imposter: histogram(&pairs.imposter, bins),
        master: histogram(&master_scores, bins),
        genuine_mean: mean(&pairs.genuine),
        imposter_mean: mean(&pairs.imposter),
        master_mean: mean(&master_scores),
    })
}

impl ScoreHistogram {
    pub fn to_csv(&self, preamble: Option<&str>) -> String {
        let mut out = comment_block(preamble);
        out.push_str("bin_lo,bin_hi,genuine,imposter,master\n");
        for i in 0..self.genuine.len() {
            let _ = writeln!(
                out,
                "{:.6},{:.6},{},{},{}",
                self.edges[i],
                self.edges[i + 1],
                self.genuine[i],
                self.imposter[i],
                self.master[i]
            );
        }
        out
    }
}

fn comment_block(preamble: Option<&str>) -> String {
    let mut out = String::new();
    for line in preamble.iter().flat_map(|p| p.lines()) {
        let _ = writeln!(out, "# {line}");
    }
    out
}

/// Highest FMR among the candidates' decoded faces.
pub fn wolf_attack_probability(
    candidates: &[MasterFaceRecord],
    decoder: &EigenfaceDecoder,
    gallery: &Gallery,
    split: Split,
    model: &EmbeddingModel,
    threshold: &DecisionThreshold,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::structural(
            "wolf attack probability needs a candidate",
        ));
    }
    check_threshold(model, threshold)?;
    let templates = gallery.enrolled_templates(split)?;
    let set = TemplateSet::new(model, &templates)?;
    let fmrs = candidates
        .par_iter()
        .map(|r| {
            let face = decoder.generate(&r.latent)?;
            let hits = set
                .scores(model, &face)?
                .iter()
                .filter(|s| s.score >= threshold.tau)
                .count();
            Ok(hits as f64 / set.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(fmrs.into_iter().fold(0.0, f64::max))
}

/// FMR of each record's face on a split, in record order.
pub fn fmr_curve(
    records: &[MasterFaceRecord],
    decoder: &EigenfaceDecoder,
    gallery: &Gallery,
    split: Split,
    model: &EmbeddingModel,
    threshold: &DecisionThreshold,
) -> Result<Vec<(usize, f64)>> {
    check_threshold(model, threshold)?;
    let templates = gallery.enrolled_templates(split)?;
    let set = TemplateSet::new(model, &templates)?;
    records
        .par_iter()
        .map(|r| {
            let face = decoder.generate(&r.latent)?;
            let hits = set
                .scores(model, &face)?
                .iter()
                .filter(|s| s.score >= threshold.tau)
                .count();
            Ok((r.iteration, hits as f64 / set.len() as f64))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Same,
    Different,
}

/// A matcher placed in one transfer cell.
#[derive(Clone, Copy, Debug)]
pub struct TransferTarget<'a> {
    pub architecture: Axis,
    pub database: Axis,
    pub model: &'a EmbeddingModel,
    pub threshold: &'a DecisionThreshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub architecture: Axis,
    pub database: Axis,
    pub report: EvalReport,
    /// fmr > eer
    pub success: bool,
}

/// Cells ordered (same, same), (same, different), (different, same),
/// (different, different) by (architecture, database).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub success_rule: String,
    pub cells: Vec<TransferCell>,
}

impl TransferMatrix {
    pub fn cell(&self, architecture: Axis, database: Axis) -> Option<&TransferCell> {
        self.cells
            .iter()
            .find(|c| c.architecture == architecture && c.database == database)
    }
}

pub fn transfer_evaluate(
    master: &FaceImage,
    targets: &[TransferTarget<'_>],
    gallery: &Gallery,
    split: Split,
) -> Result<TransferMatrix> {
    let mut cells = Vec::with_capacity(4);
    for architecture in [Axis::Same, Axis::Different] {
        for database in [Axis::Same, Axis::Different] {
            let mut found = targets
                .iter()
                .filter(|t| t.architecture == architecture && t.database == database);
            let target = found.next().ok_or_else(|| {
                Error::structural(format!(
                    "transfer cell (architecture {architecture:?}, database {database:?}) has no matcher"
                ))
            })?;
            if found.next().is_some() {
                return Err(Error::structural(format!(
                    "transfer cell (architecture {architecture:?}, database {database:?}) has several matchers"
                )));
            }
            let report = compute_fmr(master, gallery, split, target.model, target.threshold)?;
            cells.push(TransferCell {
                architecture,
                database,
                success: report.fmr > report.eer,
                report,
            });
        }
    }
    Ok(TransferMatrix {
        success_rule: "fmr > eer".into(),
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// Iteration of the record.
    pub idx: usize,
    pub x: f64,
    pub y: f64,
    pub is_best: bool,
}

/// 2-D PCA layout of every `stride`-th per-iteration best latent. The global
/// best is always included, appended if the stride skips it.
pub fn latent_trajectory_projection(
    records: &[MasterFaceRecord],
    stride: usize,
) -> Result<Vec<TrajectoryPoint>> {
    if records.len() < 2 {
        return Err(Error::structural("trajectory needs at least 2 records"));
    }
    if stride == 0 || stride > records.len() - 1 {
        return Err(Error::structural(format!(
            "stride must be in 1..={}, got {stride}",
            records.len() - 1
        )));
    }
    let scores: Vec<f64> = records.iter().map(|r| r.mean_score).collect();
    let best = scores
        .iter()
        .enumerate()
        .fold(0, |b, (i, s)| if *s > scores[b] { i } else { b });
    let picked: Vec<usize> = (0..records.len()).step_by(stride).collect();
    let samples: Vec<Vec<f64>> = picked
        .iter()
        .map(|&i| records[i].latent.as_slice().to_vec())
        .collect();
    let d = samples[0].len();
    let k = 2.min(d).min(samples.len() - 1);
    let pca = pca_fit(&samples, k)?;
    let place = |i: usize| -> Result<TrajectoryPoint> {
        let mut y = pca.project(records[i].latent.as_slice())?;
        y.resize(2, 0.0);
        Ok(TrajectoryPoint {
            idx: records[i].iteration,
            x: y[0],
            y: y[1],
            is_best: i == best,
        })
    };
    let mut points = picked
        .iter()
        .map(|&i| place(i))
        .collect::<Result<Vec<_>>>()?;
    if !picked.contains(&best) {
        points.push(place(best)?);
    }
    Ok(points)
}

pub fn trajectory_csv(points: &[TrajectoryPoint], preamble: Option<&str>) -> String {
    let mut out = comment_block(preamble);
    out.push_str("idx,x,y,is_best\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.idx, p.x, p.y, p.is_best);
    }
    out
}
