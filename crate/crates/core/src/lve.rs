//! Latent variable evolution: CMA-ES over the decoder's latent space,
//! maximizing the mean match score of one face against enrolled templates.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmaes::{CmaParams, CmaRng, CmaSnapshot, CmaState};
use crate::error::{Error, Result};
use crate::generator::EigenfaceDecoder;
use crate::matcher::{cosine, EmbeddingModel, MatchScore};
use crate::types::{FaceImage, LatentVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LveConfig {
    /// Candidates per iteration (m).
    #[serde(default = "default_population")]
    pub population: usize,
    /// Iterations (n).
    pub iterations: usize,
    pub latent_dim: usize,
    #[serde(default = "default_sigma0")]
    pub sigma0: f64,
    pub seed: u64,
    /// Record real wall time in the log. Off by default so logs are
    /// byte-reproducible; the column then holds 0.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_population() -> usize {
    22
}

fn default_sigma0() -> f64 {
    0.3
}

impl LveConfig {
    pub fn new(iterations: usize, latent_dim: usize, seed: u64) -> Self {
        LveConfig {
            population: default_population(),
            iterations,
            latent_dim,
            sigma0: default_sigma0(),
            seed,
            record_wall_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::structural("population must be at least 2"));
        }
        if self.iterations == 0 {
            return Err(Error::structural("iterations must be at least 1"));
        }
        if self.latent_dim == 0 {
            return Err(Error::structural("latent_dim must be at least 1"));
        }
        if !(self.sigma0.is_finite() && self.sigma0 > 0.0) {
            return Err(Error::structural("sigma0 must be positive"));
        }
        Ok(())
    }

    /// True when `other` describes the same search (iteration count aside).
    fn same_search(&self, other: &LveConfig) -> bool {
        self.population == other.population
            && self.latent_dim == other.latent_dim
            && self.sigma0.to_bits() == other.sigma0.to_bits()
            && self.seed == other.seed
            && self.record_wall_time == other.record_wall_time
    }
}

/// Embedded enrollment templates of one split, in enrollment order.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSet {
    identities: Vec<String>,
    embeddings: Vec<Vec<f64>>,
}

impl TemplateSet {
    pub fn new(model: &EmbeddingModel, templates: &[(String, FaceImage)]) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::structural("template list is empty"));
        }
        let embeddings = templates
            .iter()
            .map(|(_, img)| model.embed(img))
            .collect::<Result<Vec<_>>>()?;
        Ok(TemplateSet {
            identities: templates.iter().map(|(id, _)| id.clone()).collect(),
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn identities(&self) -> &[String] {
        &self.identities
    }

    /// Score of `face` against every template, in template order.
    pub fn scores(&self, model: &EmbeddingModel, face: &FaceImage) -> Result<Vec<MatchScore>> {
        let probe = model.embed(face)?;
        Ok(self.embeddings.iter().map(|t| cosine(&probe, t)).collect())
    }

    pub fn mean_score(&self, model: &EmbeddingModel, face: &FaceImage) -> Result<f64> {
        Ok(mean_of(&self.scores(model, face)?))
    }
}

fn mean_of(scores: &[MatchScore]) -> f64 {
    scores.iter().map(|s| s.score).sum::<f64>() / scores.len() as f64
}

/// Mean similarity of `face` to each template.
pub fn mean_score(
    face: &FaceImage,
    templates: &[(String, FaceImage)],
    model: &EmbeddingModel,
) -> Result<f64> {
    if templates.is_empty() {
        return Err(Error::structural("mean_score needs at least one template"));
    }
    let mut sum = 0.0;
    for (_, t) in templates {
        sum += model.face_matching(face, t)?.score;
    }
    Ok(sum / templates.len() as f64)
}

/// Index and value of the highest score; the lowest index wins ties.
pub fn get_best_face(faces: &[FaceImage], scores: &[f64]) -> Result<(usize, f64)> {
    if faces.len() != scores.len() {
        return Err(Error::structural(format!(
            "{} faces but {} scores",
            faces.len(),
            scores.len()
        )));
    }
    best_index(scores)
}

fn best_index(scores: &[f64]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            return Err(Error::structural(format!("score {i} is NaN")));
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.ok_or_else(|| Error::structural("no scores to choose from"))
}

/// The best face of one iteration, stored as its latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MasterFaceRecord {
    pub iteration: usize,
    pub seed: u64,
    pub mean_score: f64,
    pub latent: LatentVector,
    /// [`FaceImage::digest`] of the decoded face.
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub best_score: f64,
    /// Fraction of training templates the iteration's best face matches.
    pub train_fmr: f64,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: LveConfig,
    pub rows: Vec<LogRow>,
}

impl RunLog {
    /// Running maximum of `best_score`.
    pub fn running_max(&self) -> Vec<f64> {
        self.rows
            .iter()
            .scan(f64::NEG_INFINITY, |m, r| {
                *m = m.max(r.best_score);
                Some(*m)
            })
            .collect()
    }

    /// CSV with header `iteration,best_score,train_fmr,elapsed_ms`, preceded by
    /// `# ` comment lines if `preamble` is given.
    pub fn to_csv(&self, preamble: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(p) = preamble {
            for line in p.lines() {
                let _ = writeln!(out, "# {line}");
            }
        }
        out.push_str("iteration,best_score,train_fmr,elapsed_ms\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{}",
                r.iteration, r.best_score, r.train_fmr, r.elapsed_ms
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LveOutcome {
    pub log: RunLog,
    pub records: Vec<MasterFaceRecord>,
    pub best: MasterFaceRecord,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LveSnapshot {
    pub config: LveConfig,
    pub template_count: usize,
    pub cma: CmaSnapshot,
    pub rows: Vec<LogRow>,
    pub records: Vec<MasterFaceRecord>,
}

impl LveSnapshot {
    /// Iterations already completed.
    pub fn completed(&self) -> usize {
        self.rows.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// A run in progress. Drive it with [`step`](Self::step) or
/// [`run_to_end`](Self::run_to_end).
pub struct LveRun<'a> {
    config: LveConfig,
    decoder: &'a EigenfaceDecoder,
    model: &'a EmbeddingModel,
    templates: &'a TemplateSet,
    tau: f64,
    cma: CmaState,
    rng: CmaRng,
    rows: Vec<LogRow>,
    records: Vec<MasterFaceRecord>,
    started: Instant,
}

impl<'a> LveRun<'a> {
    /// Starts a fresh run from the zero latent. `tau` is only used for the
    /// training-FMR log column.
    pub fn new(
        config: &LveConfig,
        decoder: &'a EigenfaceDecoder,
        model: &'a EmbeddingModel,
        templates: &'a TemplateSet,
        tau: f64,
    ) -> Result<Self> {
        config.validate()?;
        check_dims(config, decoder, templates)?;
        let params = CmaParams::new(config.latent_dim, config.population, config.sigma0)?;
        let cma = CmaState::new(params, vec![0.0; config.latent_dim])?;
        Ok(LveRun {
            config: config.clone(),
            decoder,
            model,
            templates,
            tau,
            cma,
            rng: CmaRng::seed_from_u64(config.seed),
            rows: Vec::new(),
            records: Vec::new(),
            started: Instant::now(),
        })
    }

    /// Continues from a snapshot. `config` may raise the iteration count but
    /// must otherwise match the snapshot.
    pub fn resume(
        snapshot: &LveSnapshot,
        config: &LveConfig,
        decoder: &'a EigenfaceDecoder,
        model: &'a EmbeddingModel,
        templates: &'a TemplateSet,
        tau: f64,
    ) -> Result<Self> {
        config.validate()?;
        if !config.same_search(&snapshot.config) {
            return Err(Error::structural(format!(
                "snapshot was taken with a different configuration \
                 (latent_dim {} vs {}, population {} vs {}, seed {} vs {})",
                snapshot.config.latent_dim,
                config.latent_dim,
                snapshot.config.population,
                config.population,
                snapshot.config.seed,
                config.seed
            )));
        }
        if snapshot.completed() >= config.iterations {
            return Err(Error::structural(format!(
                "snapshot already covers {} of {} iterations",
                snapshot.completed(),
                config.iterations
            )));
        }
        if snapshot.template_count != templates.len() {
            return Err(Error::structural(format!(
                "snapshot scored {} templates, {} supplied",
                snapshot.template_count,
                templates.len()
            )));
        }
        if snapshot.records.len() != snapshot.rows.len()
            || snapshot.cma.state.generation() as usize != snapshot.rows.len()
            || snapshot.cma.seed != config.seed
        {
            return Err(Error::structural("snapshot is internally inconsistent"));
        }
        check_dims(config, decoder, templates)?;
        Ok(LveRun {
            config: config.clone(),
            decoder,
            model,
            templates,
            tau,
            cma: snapshot.cma.state.clone(),
            rng: snapshot.cma.rng.restore()?,
            rows: snapshot.rows.clone(),
            records: snapshot.records.clone(),
            started: Instant::now(),
        })
    }

    pub fn completed(&self) -> usize {
        self.rows.len()
    }

    pub fn is_done(&self) -> bool {
        self.completed() >= self.config.iterations
    }

    pub fn cma(&self) -> &CmaState {
        &self.cma
    }

    pub fn snapshot(&self) -> LveSnapshot {
        LveSnapshot {
            config: self.config.clone(),
            template_count: self.templates.len(),
            cma: CmaSnapshot::capture(self.config.seed, &self.cma, &self.rng),
            rows: self.rows.clone(),
            records: self.records.clone(),
        }
    }

    /// One iteration: ask, decode, score, keep the local best, tell.
    pub fn step(&mut self) -> Result<()> {
        let iteration = self.completed();
        let mut candidates = self.cma.ask(&mut self.rng)?;
        let latents: Vec<LatentVector> = candidates.iter().map(|c| c.latent.clone()).collect();
        let faces = self.decoder.batch_generate(&latents)?;
        let scored = faces
            .par_iter()
            .map(|f| self.templates.scores(self.model, f))
            .collect::<Result<Vec<_>>>()?;
        let means: Vec<f64> = scored.iter().map(|s| mean_of(s)).collect();
        if let Some(i) = means.iter().position(|m| !m.is_finite()) {
            return Err(Error::numerical(format!(
                "candidate {i} scored {} at iteration {iteration}",
                means[i]
            )));
        }
        let (best, best_score) = get_best_face(&faces, &means)?;
        let matched = scored[best].iter().filter(|s| s.score >= self.tau).count();
        for (c, m) in candidates.iter_mut().zip(&means) {
            c.fitness = Some(*m);
        }
        self.cma
            .tell(&candidates)
            .map_err(|e| Error::numerical(format!("iteration {iteration}: {e}")))?;

        self.records.push(MasterFaceRecord {
            iteration,
            seed: self.config.seed,
            mean_score: best_score,
            latent: latents[best].clone(),
            digest: faces[best].digest(),
        });
        self.rows.push(LogRow {
            iteration,
            best_score,
            train_fmr: matched as f64 / self.templates.len() as f64,
            elapsed_ms: if self.config.record_wall_time {
                self.started.elapsed().as_millis() as u64
            } else {
                0
            },
        });
        Ok(())
    }

    pub fn run_to_end(mut self) -> Result<LveOutcome> {
        while !self.is_done() {
            self.step()?;
        }
        self.finish()
    }

    /// Selects the global best among the per-iteration bests.
    pub fn finish(self) -> Result<LveOutcome> {
        let scores: Vec<f64> = self.records.iter().map(|r| r.mean_score).collect();
        let (i, _) = best_index(&scores)?;
        Ok(LveOutcome {
            best: self.records[i].clone(),
            log: RunLog {
                config: self.config,
                rows: self.rows,
            },
            records: self.records,
        })
    }
}

fn check_dims(
    config: &LveConfig,
    decoder: &EigenfaceDecoder,
    templates: &TemplateSet,
) -> Result<()> {
    if decoder.latent_dim() != config.latent_dim {
        return Err(Error::structural(format!(
            "decoder latent_dim {} differs from configured {}",
            decoder.latent_dim(),
            config.latent_dim
        )));
    }
    if templates.is_empty() {
        return Err(Error::structural("no enrolled templates to score against"));
    }
    Ok(())
}

/// Runs all iterations of a fresh search.
pub fn run_lve(
    config: &LveConfig,
    decoder: &EigenfaceDecoder,
    model: &EmbeddingModel,
    templates: &TemplateSet,
    tau: f64,
) -> Result<LveOutcome> {
    LveRun::new(config, decoder, model, templates, tau)?.run_to_end()
}

/// Best of `samples` standard-normal latents, the random-search baseline.
pub fn random_search(
    decoder: &EigenfaceDecoder,
    model: &EmbeddingModel,
    templates: &TemplateSet,
    samples: usize,
    seed: u64,
) -> Result<MasterFaceRecord> {
    let mut rng = CmaRng::seed_from_u64(seed);
    let k = decoder.latent_dim();
    let latents = (0..samples)
        .map(|_| LatentVector::new((0..k).map(|_| rng.sample(StandardNormal)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let means = latents
        .par_iter()
        .map(|z| templates.mean_score(model, &decoder.generate(z)?))
        .collect::<Result<Vec<f64>>>()?;
    let (i, s) = best_index(&means)?;
    Ok(MasterFaceRecord {
        iteration: i,
        seed,
        mean_score: s,
        digest: decoder.generate(&latents[i])?.digest(),
        latent: latents[i].clone(),
    })
}
