//! The pipeline stages. Each reads its inputs from, and writes its outputs
//! to, the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use masterface::data::{load_manifest, synth_gallery, write_manifest};
use masterface::eval::{
    compute_fmr, fmr_curve, latent_trajectory_projection, score_histograms, trajectory_csv,
    transfer_evaluate, wolf_attack_probability, Axis, EvalReport, TransferMatrix, TransferTarget,
};
use masterface::generator::train_decoder;
use masterface::lve::{random_search, LveRun, LveSnapshot};
use masterface::matcher::{calibrate_threshold, train_matcher};
use masterface::modelio::{load_decoder, load_matcher, save_decoder, save_matcher};
use masterface::{
    DecisionThreshold, EigenfaceDecoder, EmbeddingModel, Gallery, MasterFaceRecord, Split,
    TemplateSet,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{GalleryRole, GallerySource, RunConfig};
use crate::error::{CliError, CliResult};

/// Provenance stamped on every output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub config_digest: String,
    pub seed: u64,
}

impl Meta {
    fn line(&self) -> String {
        format!("config_digest={} seed={}", self.config_digest, self.seed)
    }

    fn map(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("config_digest".to_string(), self.config_digest.clone()),
            ("seed".to_string(), self.seed.to_string()),
        ])
    }
}

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub meta: Meta,
}

impl Context {
    pub fn new(config: RunConfig, out: PathBuf) -> Self {
        let meta = Meta {
            config_digest: config.digest(),
            seed: config.lve.seed,
        };
        Context { config, out, meta }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn gallery_dir(role: GalleryRole) -> &'static str {
        match role {
            GalleryRole::Target => "gallery",
            GalleryRole::Auxiliary => "auxiliary",
        }
    }

    fn source(&self, role: GalleryRole) -> CliResult<&GallerySource> {
        match role {
            GalleryRole::Target => Ok(&self.config.gallery),
            GalleryRole::Auxiliary => self
                .config
                .auxiliary_gallery
                .as_ref()
                .ok_or_else(|| CliError::Config("auxiliary_gallery is not set".into())),
        }
    }

    fn gallery(&self, role: GalleryRole) -> CliResult<Gallery> {
        let path = match self.source(role)? {
            GallerySource::Manifest(p) => p.clone(),
            GallerySource::Synth(_) => self.out.join(Self::gallery_dir(role)).join("manifest.csv"),
        };
        if !path.is_file() {
            return Err(CliError::Prerequisite {
                path,
                stage: "synth",
            });
        }
        Ok(load_manifest(&path)?)
    }

    fn decoder_path(&self) -> PathBuf {
        self.path("models/decoder.mfm")
    }

    fn matcher_path(&self, tag: &str) -> PathBuf {
        self.path(&format!("models/matcher-{tag}.mfm"))
    }

    fn load_decoder(&self) -> CliResult<EigenfaceDecoder> {
        let path = require(self.decoder_path(), "train")?;
        Ok(load_decoder(&path)?.0)
    }

    fn load_matcher(&self, tag: &str) -> CliResult<EmbeddingModel> {
        let path = require(self.matcher_path(tag), "train")?;
        let model = load_matcher(&path)?.0;
        if model.tag() != tag {
            return Err(CliError::Core(masterface::Error::ModelFormat(format!(
                "{} holds matcher `{}`",
                path.display(),
                model.tag()
            ))));
        }
        Ok(model)
    }

    fn calibration(&self) -> CliResult<Calibration> {
        read_json(&require(self.path("calibration.json"), "train")?)
    }

    fn masters(&self) -> CliResult<MastersFile> {
        read_json(&require(self.path("attack/masters.json"), "attack")?)
    }
}

fn require(path: PathBuf, stage: &'static str) -> CliResult<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Prerequisite { path, stage })
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_bytes(path, text)
}

/// Writes each synthetic gallery as PGM images plus a manifest.
pub fn cmd_synth(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let mut written = Vec::new();
    for role in [GalleryRole::Target, GalleryRole::Auxiliary] {
        let Ok(GallerySource::Synth(spec)) = ctx.source(role) else {
            continue;
        };
        let gallery = synth_gallery(spec)?;
        let dir = ctx.out.join(Context::gallery_dir(role));
        let comment = format!("{} gallery_seed={}", ctx.meta.line(), spec.seed);
        written.push(write_manifest(&gallery, &dir, Some(&comment))?);
    }
    if written.is_empty() {
        return Err(CliError::Config(
            "no gallery in the config is synthetic".into(),
        ));
    }
    Ok(written)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderSummary {
    pub k: usize,
    pub width: usize,
    pub height: usize,
    pub training_images: usize,
    pub max_residual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Calibration {
    pub meta: Meta,
    pub decoder: DecoderSummary,
    pub thresholds: Vec<DecisionThreshold>,
}

impl Calibration {
    pub fn threshold(&self, tag: &str) -> CliResult<&DecisionThreshold> {
        self.thresholds
            .iter()
            .find(|t| t.model_tag == tag)
            .ok_or_else(|| {
                CliError::Config(format!("calibration.json has no threshold for `{tag}`"))
            })
    }
}

/// Fits the decoder and every matcher, then calibrates each matcher's EER
/// threshold on the target gallery.
pub fn cmd_train(ctx: &Context) -> CliResult<Calibration> {
    let cfg = &ctx.config;
    let target = ctx.gallery(GalleryRole::Target)?;
    let auxiliary = match cfg.auxiliary_gallery {
        Some(_)
            if cfg
                .matchers
                .iter()
                .any(|m| m.gallery == GalleryRole::Auxiliary) =>
        {
            Some(ctx.gallery(GalleryRole::Auxiliary)?)
        }
        _ => None,
    };

    let decoder = train_decoder(&target, cfg.generator.k)?;
    let models = ctx.path("models");
    fs::create_dir_all(&models).map_err(|e| CliError::io(&models, e))?;
    save_decoder(&ctx.decoder_path(), &decoder, ctx.meta.map())?;

    let mut thresholds = Vec::new();
    for m in &cfg.matchers {
        let source = match m.gallery {
            GalleryRole::Target => &target,
            GalleryRole::Auxiliary => auxiliary.as_ref().expect("loaded above"),
        };
        let model = train_matcher(source, m.split, m.e, m.feature_map, &m.tag)?;
        let mut meta = ctx.meta.map();
        meta.insert("gallery".into(), format!("{:?}", m.gallery).to_lowercase());
        meta.insert("split".into(), m.split.to_string());
        save_matcher(&ctx.matcher_path(&m.tag), &model, meta)?;
        thresholds.push(calibrate_threshold(
            &model,
            &target,
            cfg.eval.calibration_split,
        )?);
    }

    let calibration = Calibration {
        meta: ctx.meta.clone(),
        decoder: DecoderSummary {
            k: decoder.latent_dim(),
            width: decoder.width(),
            height: decoder.height(),
            training_images: decoder.residuals().len(),
            max_residual: decoder.residuals().iter().copied().fold(0.0, f64::max),
        },
        thresholds,
    };
    write_json(&ctx.path("calibration.json"), &calibration)?;
    Ok(calibration)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MastersFile {
    pub meta: Meta,
    pub matcher: String,
    /// Split whose enrollment templates formed the fitness.
    pub template_split: Split,
    /// How the training-FMR log column was computed.
    pub train_fmr_reference: String,
    pub records: Vec<MasterFaceRecord>,
    pub best: MasterFaceRecord,
}

/// A resumable search state as written to `attack/snapshots/`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SnapshotFile {
    pub meta: Meta,
    pub snapshot: LveSnapshot,
}

fn snapshot_path(ctx: &Context, completed: usize) -> PathBuf {
    ctx.path(&format!("attack/snapshots/iter-{completed:05}.json"))
}

/// Runs the search and writes the log, the per-iteration bests and
/// snapshots. With `resume`, continues from a snapshot file.
pub fn cmd_attack(ctx: &Context, resume: Option<&Path>) -> CliResult<MastersFile> {
    let cfg = &ctx.config;
    let decoder = ctx.load_decoder()?;
    let model = ctx.load_matcher(&cfg.attack_matcher)?;
    let calibration = ctx.calibration()?;
    let tau = calibration.threshold(&cfg.attack_matcher)?.tau;
    let gallery = ctx.gallery(GalleryRole::Target)?;
    let templates = TemplateSet::new(&model, &gallery.enrolled_templates(Split::World)?)?;
    let lve = cfg.lve_config();

    let mut run = match resume {
        Some(path) => {
            let file: SnapshotFile = read_json(path)?;
            LveRun::resume(&file.snapshot, &lve, &decoder, &model, &templates, tau)?
        }
        None => LveRun::new(&lve, &decoder, &model, &templates, tau)?,
    };
    let every = cfg.lve.snapshot_every;
    while !run.is_done() {
        run.step()?;
        let done = run.completed();
        if (every > 0 && done % every == 0) || run.is_done() {
            let file = SnapshotFile {
                meta: ctx.meta.clone(),
                snapshot: run.snapshot(),
            };
            write_json(&snapshot_path(ctx, done), &file)?;
        }
    }
    let outcome = run.finish()?;

    let preamble = format!(
        "{}\nfitness: mean score vs world enrollment templates; train_fmr at tau={} ({} calibration)",
        ctx.meta.line(),
        tau,
        cfg.eval.calibration_split
    );
    write_bytes(
        &ctx.path("attack/runlog.csv"),
        outcome.log.to_csv(Some(&preamble)),
    )?;
    let masters = MastersFile {
        meta: ctx.meta.clone(),
        matcher: cfg.attack_matcher.clone(),
        template_split: Split::World,
        train_fmr_reference: format!(
            "world enrollment templates, {}-calibrated EER threshold",
            cfg.eval.calibration_split
        ),
        records: outcome.records,
        best: outcome.best,
    };
    write_json(&ctx.path("attack/masters.json"), &masters)?;
    Ok(masters)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub samples: usize,
    pub best_mean_score: f64,
    pub fmr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalFile {
    pub meta: Meta,
    pub report: EvalReport,
    /// Highest FMR over all per-iteration bests.
    pub wolf_attack_probability: f64,
    pub master_mean_score_world: f64,
    pub histogram_means: HistogramMeans,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_baseline: Option<BaselineSummary>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistogramMeans {
    pub genuine: f64,
    pub imposter: f64,
    pub master: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferFile {
    pub meta: Meta,
    pub matrix: TransferMatrix,
    /// Matcher tag per cell, same order as the matrix.
    pub tags: Vec<String>,
}

/// Places each configured matcher in the transfer grid relative to the
/// attack matcher, which always fills (same, same). Other matchers that would
/// also land in (same, same) are ignored.
fn transfer_tags(cfg: &RunConfig) -> CliResult<Vec<(Axis, Axis, String)>> {
    let attack = cfg.matcher(&cfg.attack_matcher).expect("validated");
    let mut cells = vec![(Axis::Same, Axis::Same, attack.tag.clone())];
    for m in cfg.matchers.iter().filter(|m| m.tag != attack.tag) {
        let arch = if m.e == attack.e && m.feature_map == attack.feature_map {
            Axis::Same
        } else {
            Axis::Different
        };
        let db = if m.gallery == attack.gallery && m.split == attack.split {
            Axis::Same
        } else {
            Axis::Different
        };
        if (arch, db) == (Axis::Same, Axis::Same) {
            continue;
        }
        if let Some((_, _, other)) = cells.iter().find(|(a, d, _)| (*a, *d) == (arch, db)) {
            return Err(CliError::Config(format!(
                "matchers `{other}` and `{}` both fill transfer cell ({arch:?}, {db:?})",
                m.tag
            )));
        }
        cells.push((arch, db, m.tag.clone()));
    }
    Ok(cells)
}

pub fn cmd_evaluate(ctx: &Context) -> CliResult<(EvalFile, Option<TransferFile>)> {
    let cfg = &ctx.config;
    let masters = ctx.masters()?;
    let decoder = ctx.load_decoder()?;
    let calibration = ctx.calibration()?;
    let gallery = ctx.gallery(GalleryRole::Target)?;
    let model = ctx.load_matcher(&cfg.attack_matcher)?;
    let threshold = calibration.threshold(&cfg.attack_matcher)?;
    let split = cfg.eval.split;

    let master = decoder.generate(&masters.best.latent)?;
    if master.digest() != masters.best.digest {
        return Err(CliError::Core(masterface::Error::Structural(
            "regenerated master face does not match its recorded digest; \
             was the decoder retrained after the attack?"
                .into(),
        )));
    }
    let report = compute_fmr(&master, &gallery, split, &model, threshold)?;
    let wap = wolf_attack_probability(
        &masters.records,
        &decoder,
        &gallery,
        split,
        &model,
        threshold,
    )?;
    let hist = score_histograms(&gallery, split, &model, &master, cfg.eval.bins)?;
    let world = TemplateSet::new(&model, &gallery.enrolled_templates(Split::World)?)?;

    let random_baseline = if cfg.eval.baseline_samples > 0 {
        let rb = random_search(
            &decoder,
            &model,
            &world,
            cfg.eval.baseline_samples,
            cfg.lve.seed,
        )?;
        let face = decoder.generate(&rb.latent)?;
        Some(BaselineSummary {
            samples: cfg.eval.baseline_samples,
            best_mean_score: rb.mean_score,
            fmr: compute_fmr(&face, &gallery, split, &model, threshold)?.fmr,
        })
    } else {
        None
    };

    let line = ctx.meta.line();
    write_bytes(&ctx.path("eval/histogram.csv"), hist.to_csv(Some(&line)))?;
    let n = masters.records.len();
    if n >= 2 {
        let stride = cfg.eval.trajectory_stride.min(n - 1);
        let points = latent_trajectory_projection(&masters.records, stride)?;
        write_bytes(
            &ctx.path("eval/trajectory.csv"),
            trajectory_csv(&points, Some(&line)),
        )?;
    }
    let curve = fmr_curve(
        &masters.records,
        &decoder,
        &gallery,
        split,
        &model,
        threshold,
    )?;
    let mut text = format!("# {line}\niteration,fmr\n");
    for (i, f) in curve {
        text.push_str(&format!("{i},{f:.6}\n"));
    }
    write_bytes(&ctx.path("eval/fmr_curve.csv"), text)?;

    let eval_file = EvalFile {
        meta: ctx.meta.clone(),
        master_mean_score_world: world.mean_score(&model, &master)?,
        report,
        wolf_attack_probability: wap,
        histogram_means: HistogramMeans {
            genuine: hist.genuine_mean,
            imposter: hist.imposter_mean,
            master: hist.master_mean,
        },
        random_baseline,
    };
    write_json(&ctx.path("eval/report.json"), &eval_file)?;

    let cells = transfer_tags(cfg)?;
    let transfer = if cells.len() == 4 {
        let models = cells
            .iter()
            .map(|(_, _, tag)| ctx.load_matcher(tag))
            .collect::<CliResult<Vec<_>>>()?;
        let thresholds = cells
            .iter()
            .map(|(_, _, tag)| calibration.threshold(tag))
            .collect::<CliResult<Vec<_>>>()?;
        let targets: Vec<TransferTarget> = cells
            .iter()
            .zip(&models)
            .zip(&thresholds)
            .map(|(((a, d, _), model), threshold)| TransferTarget {
                architecture: *a,
                database: *d,
                model,
                threshold,
            })
            .collect();
        let matrix = transfer_evaluate(&master, &targets, &gallery, split)?;
        let tags = matrix
            .cells
            .iter()
            .map(|c| {
                cells
                    .iter()
                    .find(|(a, d, _)| (*a, *d) == (c.architecture, c.database))
                    .map(|(_, _, t)| t.clone())
                    .expect("cell came from the list")
            })
            .collect();
        let file = TransferFile {
            meta: ctx.meta.clone(),
            matrix,
            tags,
        };
        write_json(&ctx.path("eval/transfer.json"), &file)?;
        Some(file)
    } else {
        None
    };
    Ok((eval_file, transfer))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub meta: Meta,
    pub config: RunConfig,
    pub calibration: Calibration,
    pub attack: AttackSummary,
    pub evaluation: EvalFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackSummary {
    pub iterations: usize,
    pub best: MasterFaceRecord,
    pub best_score_by_iteration: Vec<f64>,
}

/// Merges the stage outputs into `report.json`.
pub fn cmd_report(ctx: &Context) -> CliResult<Report> {
    let calibration = ctx.calibration()?;
    let masters = ctx.masters()?;
    let evaluation: EvalFile = read_json(&require(ctx.path("eval/report.json"), "evaluate")?)?;
    let transfer_path = ctx.path("eval/transfer.json");
    let transfer = if transfer_path.is_file() {
        Some(read_json(&transfer_path)?)
    } else {
        None
    };
    let report = Report {
        meta: ctx.meta.clone(),
        config: ctx.config.clone(),
        calibration,
        attack: AttackSummary {
            iterations: masters.records.len(),
            best_score_by_iteration: masters.records.iter().map(|r| r.mean_score).collect(),
            best: masters.best,
        },
        evaluation,
        transfer,
    };
    write_json(&ctx.path("report.json"), &report)?;
    Ok(report)
}
