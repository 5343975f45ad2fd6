//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stderr
//! (bypassing the harness capture) before asserting.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use masterface::cmaes::CmaRng;
use masterface::eval::{compute_fmr, wolf_attack_probability};
use masterface::lve::{get_best_face, mean_score};
use masterface::matcher::eer_from_scores;
use masterface::{
    CmaParams, CmaState, DecisionThreshold, EigenfaceDecoder, EmbeddingModel, FaceImage,
    FeatureMap, Gallery, GalleryEntry, LatentVector, MasterFaceRecord, Split, TemplateSet,
};
use masterface_cli::pipeline::{cmd_attack, cmd_evaluate, cmd_synth, cmd_train};
use masterface_cli::{Context, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Fixed seeds of the acceptance suite.
const SUITE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n} [{}] {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn reference_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json")
}

// ---------------------------------------------------------------- CMA-ES

fn sphere(x: &[f64]) -> f64 {
    -x.iter().map(|v| v * v).sum::<f64>()
}

fn rosenbrock(x: &[f64]) -> f64 {
    -x.windows(2)
        .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
        .sum::<f64>()
}

/// Best fitness seen within `budget` evaluations. When the state asks for a
/// restart, the search starts over from a new random point with the same λ.
fn optimize(f: fn(&[f64]) -> f64, dim: usize, lambda: usize, budget: usize, seed: u64) -> f64 {
    let mut rng = CmaRng::seed_from_u64(seed);
    let params = CmaParams::new(dim, lambda, 0.5).unwrap();
    let fresh = |rng: &mut CmaRng| {
        let mean0: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        CmaState::new(params.clone(), mean0).unwrap()
    };
    let mut cma = fresh(&mut rng);
    let mut best = f64::NEG_INFINITY;
    let mut used = 0;
    while used + lambda <= budget {
        let mut cands = cma.ask(&mut rng).unwrap();
        for c in &mut cands {
            let v = f(c.latent.as_slice());
            best = best.max(v);
            c.fitness = Some(v);
        }
        used += lambda;
        cma.tell(&cands).unwrap();
        if cma.should_restart().is_some() {
            cma = fresh(&mut rng);
        }
    }
    best
}

#[test]
fn criterion_1_cmaes_convergence() {
    let start = Instant::now();
    let mut fails = Vec::new();
    for seed in SUITE_SEEDS {
        let s = optimize(sphere, 10, 22, 5_000, seed);
        if s <= -1e-10 {
            fails.push(format!("sphere seed {seed}: {s:e}"));
        }
        let r = optimize(rosenbrock, 5, CmaParams::default_lambda(5), 50_000, seed);
        if r <= -1e-6 {
            fails.push(format!("rosenbrock seed {seed}: {r:e}"));
        }
    }
    let took = start.elapsed();
    let pass = fails.is_empty() && took < Duration::from_secs(30);
    verdict(
        1,
        "CMA-ES sphere/Rosenbrock",
        pass,
        &format!(
            "{} seeds, {:.2?}, failures {fails:?}",
            SUITE_SEEDS.len(),
            took
        ),
    );
}

/// Records every sampled point and the state after each update.
fn trajectory(seed: u64, map: &dyn Fn(f64) -> f64) -> Vec<String> {
    let mut rng = CmaRng::seed_from_u64(seed);
    let mut cma = CmaState::new(CmaParams::new(6, 10, 0.7).unwrap(), vec![0.8; 6]).unwrap();
    let mut out = Vec::new();
    for _ in 0..60 {
        let mut cands = cma.ask(&mut rng).unwrap();
        for c in &mut cands {
            c.fitness = Some(map(rosenbrock(c.latent.as_slice())));
        }
        cma.tell(&cands).unwrap();
        let pts: Vec<&LatentVector> = cands.iter().map(|c| &c.latent).collect();
        out.push(serde_json::to_string(&(pts, &cma)).unwrap());
    }
    out
}

#[test]
fn criterion_2_rank_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a: f64 = rng.random_range(0.5..5.0);
    let b: f64 = rng.random_range(-10.0..10.0);
    let c: f64 = rng.random_range(0.001..0.01);
    type Map = Box<dyn Fn(f64) -> f64>;
    let maps: [(&str, Map); 3] = [
        ("affine", Box::new(move |f| a * f + b)),
        ("exp", Box::new(move |f| (c * f).exp())),
        ("cube", Box::new(|f| f * f * f + f)),
    ];
    let mut broken = Vec::new();
    for seed in [11, 12, 13] {
        let base = trajectory(seed, &|f| f);
        for (name, m) in &maps {
            if trajectory(seed, m.as_ref()) != base {
                broken.push(format!("{name}@{seed}"));
            }
        }
    }
    verdict(
        2,
        "rank invariance",
        broken.is_empty(),
        &format!("3 maps x 3 seeds, differing: {broken:?}"),
    );
}

// ------------------------------------------------------------------- EER

#[test]
fn criterion_3_eer_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gen = Normal::new(0.7, 0.1).unwrap();
    let imp = Normal::new(0.0, 0.1).unwrap();
    let genuine: Vec<f64> = (0..10_000).map(|_| gen.sample(&mut rng)).collect();
    let imposter: Vec<f64> = (0..10_000).map(|_| imp.sample(&mut rng)).collect();
    let p = eer_from_scores(&genuine, &imposter).unwrap();
    // Equal spreads cross at 0.35, 3.5 sd from both means: Φ(−3.5).
    let analytic = 2.326_290_790_355_25e-4;
    let close = (p.eer - analytic).abs() <= 0.01;

    let g2: Vec<f64> = (0..1000).map(|i| 0.6 + 0.0003 * i as f64).collect();
    let i2: Vec<f64> = (0..1000).map(|i| -0.2 + 0.0004 * i as f64).collect();
    let sep = eer_from_scores(&g2, &i2).unwrap();
    verdict(
        3,
        "EER oracle",
        close && sep.eer == 0.0,
        &format!(
            "gaussian eer {:.6} vs {analytic:.6} (tau {:.4}); separated eer {}",
            p.eer, p.tau, sep.eer
        ),
    );
}

// ---------------------------------------------------- attack, 4 / 5 / 6

struct SeedRun {
    seed: u64,
    eer: f64,
    fmr: f64,
    best: f64,
    baseline_best: f64,
    baseline_fmr: f64,
    genuine: f64,
    imposter: f64,
    master: f64,
    same_same: Option<(f64, f64, bool)>,
    cells: usize,
    serialized: bool,
}

fn pipeline(seed: u64, out: &Path) -> SeedRun {
    let mut cfg = RunConfig::load(&reference_config()).unwrap();
    cfg.lve.seed = seed;
    let ctx = Context::new(cfg, out.to_path_buf());
    cmd_synth(&ctx).unwrap();
    let cal = cmd_train(&ctx).unwrap();
    cmd_attack(&ctx, None).unwrap();
    let (eval, transfer) = cmd_evaluate(&ctx).unwrap();
    let baseline = eval
        .random_baseline
        .as_ref()
        .expect("config asks for a baseline");
    let eer = cal.threshold(&ctx.config.attack_matcher).unwrap().eer;
    let (same_same, cells) = match &transfer {
        Some(t) => (
            t.matrix
                .cell(masterface::eval::Axis::Same, masterface::eval::Axis::Same)
                .map(|c| (c.report.fmr, c.report.eer, c.success)),
            t.matrix.cells.len(),
        ),
        None => (None, 0),
    };
    SeedRun {
        seed,
        eer,
        fmr: eval.report.fmr,
        best: eval.master_mean_score_world,
        baseline_best: baseline.best_mean_score,
        baseline_fmr: baseline.fmr,
        genuine: eval.histogram_means.genuine,
        imposter: eval.histogram_means.imposter,
        master: eval.histogram_means.master,
        same_same,
        cells,
        serialized: out.join("eval/transfer.json").is_file(),
    }
}

/// One pipeline run per suite seed, shared by criteria 4 to 6.
fn suite_runs() -> &'static (Vec<SeedRun>, Duration) {
    static RUNS: std::sync::OnceLock<(Vec<SeedRun>, Duration)> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let runs = SUITE_SEEDS
            .iter()
            .map(|&s| {
                let dir = tempfile::tempdir().unwrap();
                pipeline(s, dir.path())
            })
            .collect();
        (runs, start.elapsed())
    })
}

#[test]
fn criterion_4_attack_effectiveness() {
    let (runs, took) = suite_runs();
    let mut lines = Vec::new();
    let mut pass = *took < Duration::from_secs(300);
    for r in runs {
        let ok = r.eer < 0.05
            && r.fmr >= 5.0 * r.eer
            && r.best >= r.baseline_best
            && r.fmr >= r.baseline_fmr;
        pass &= ok;
        lines.push(format!(
            "seed {} eer {:.4} fmr {:.2} (baseline {:.2}) mean {:.4} (baseline {:.4}){}",
            r.seed,
            r.eer,
            r.fmr,
            r.baseline_fmr,
            r.best,
            r.baseline_best,
            if ok { "" } else { " <-" }
        ));
    }
    verdict(
        4,
        "attack effectiveness",
        pass,
        &format!("{:.2?}; {}", took, lines.join("; ")),
    );
}

#[test]
fn criterion_5_histogram_shape() {
    let (runs, _) = suite_runs();
    let mut pass = true;
    let mut lines = Vec::new();
    for r in runs {
        let ok = r.imposter < r.master && r.master < r.genuine;
        pass &= ok;
        lines.push(format!(
            "seed {} imposter {:.3} < master {:.3} < genuine {:.3}{}",
            r.seed,
            r.imposter,
            r.master,
            r.genuine,
            if ok { "" } else { " <-" }
        ));
    }
    verdict(5, "histogram shape", pass, &lines.join("; "));
}

#[test]
fn criterion_6_transfer_matrix() {
    let (runs, _) = suite_runs();
    let mut pass = true;
    let mut lines = Vec::new();
    for r in runs {
        let ok = r.cells == 4
            && r.serialized
            && matches!(r.same_same, Some((fmr, eer, true)) if fmr > eer);
        pass &= ok;
        lines.push(format!(
            "seed {} same/same {:?} cells {}",
            r.seed, r.same_same, r.cells
        ));
    }
    verdict(6, "transfer matrix", pass, &lines.join("; "));
}

// ------------------------------------------------------ determinism, 7

fn cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_masterface"))
        .args(args)
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "masterface {args:?} failed");
}

fn stage(name: &str, out: &Path, extra: &[&str]) {
    let cfg = reference_config();
    let mut args = vec![
        name,
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    cli(&args);
}

fn full(out: &Path) {
    for s in ["synth", "train", "attack", "evaluate", "report"] {
        stage(s, out, &[]);
    }
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn differing(a: &Path, b: &Path, rel: &[PathBuf]) -> Vec<PathBuf> {
    rel.iter()
        .filter(|r| fs::read(a.join(r)).ok() != fs::read(b.join(r)).ok())
        .cloned()
        .collect()
}

#[test]
fn criterion_7_determinism_and_resume() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full(a.path());
    full(b.path());
    let listed = files(a.path());
    let same_listing = listed == files(b.path());
    let diff_full = differing(a.path(), b.path(), &listed);

    // Interrupted run: stop at 100 iterations, then resume to the configured 200.
    let c = tempfile::tempdir().unwrap();
    stage("synth", c.path(), &[]);
    stage("train", c.path(), &[]);
    stage("attack", c.path(), &["--iterations", "100"]);
    let snap = c.path().join("attack/snapshots/iter-00100.json");
    stage("attack", c.path(), &["--resume", snap.to_str().unwrap()]);
    stage("evaluate", c.path(), &[]);
    stage("report", c.path(), &[]);
    let resumed: Vec<PathBuf> = listed
        .iter()
        .filter(|p| !p.starts_with("attack/snapshots") || p.ends_with("iter-00200.json"))
        .cloned()
        .collect();
    let diff_resume = differing(a.path(), c.path(), &resumed);

    verdict(
        7,
        "determinism and resumption",
        same_listing && diff_full.is_empty() && diff_resume.is_empty() && !listed.is_empty(),
        &format!(
            "{} files compared; rerun differs {diff_full:?}; resume differs {diff_resume:?}",
            listed.len()
        ),
    );
}

// -------------------------------------------------------- oracles, 8

fn random_face(rng: &mut ChaCha8Rng, w: usize, h: usize) -> FaceImage {
    FaceImage::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
}

struct Fixture {
    gallery: Gallery,
    model: EmbeddingModel,
    decoder: EigenfaceDecoder,
}

fn fixture(rng: &mut ChaCha8Rng) -> Fixture {
    let (w, h) = (rng.random_range(2..5), rng.random_range(2..5));
    let mut entries = Vec::new();
    for (s, split) in Split::ALL.into_iter().enumerate() {
        let ids = rng.random_range(if split == Split::World { 2..5 } else { 1..6 });
        for i in 0..ids {
            for _ in 0..rng.random_range(1..4) {
                entries.push(GalleryEntry {
                    identity: format!("s{s}i{i}"),
                    split,
                    image: random_face(rng, w, h),
                });
            }
        }
    }
    // Shuffle so the enrollment image is not simply the first drawn.
    for i in (1..entries.len()).rev() {
        entries.swap(i, rng.random_range(0..=i));
    }
    let gallery = Gallery::new(entries).unwrap();
    let world = gallery.images(Split::World);
    let e = rng.random_range(1..world.len().min(4));
    let fm = if rng.random_bool(0.5) {
        FeatureMap::Identity
    } else {
        FeatureMap::BlockAverage2x2
    };
    let e = e.min(fm.output_len(w, h));
    let model = EmbeddingModel::train(&world, e, fm, "m").unwrap();
    let k = rng.random_range(1..world.len().min(4));
    let decoder = EigenfaceDecoder::train(&world, k.min(w * h)).unwrap();
    Fixture {
        gallery,
        model,
        decoder,
    }
}

/// Enrollment image per identity by brute force: first listed, label order.
fn brute_templates(g: &Gallery, split: Split) -> Vec<(String, FaceImage)> {
    let mut ids: Vec<String> = Vec::new();
    for e in g.entries() {
        if e.split == split && !ids.contains(&e.identity) {
            ids.push(e.identity.clone());
        }
    }
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let img = g
                .entries()
                .iter()
                .find(|e| e.identity == id)
                .unwrap()
                .image
                .clone();
            (id, img)
        })
        .collect()
}

fn brute_fmr(f: &Fixture, face: &FaceImage, split: Split, tau: f64) -> (f64, Vec<String>) {
    let t = brute_templates(&f.gallery, split);
    let mut hits = Vec::new();
    for (id, img) in &t {
        if f.model.face_matching(face, img).unwrap().score >= tau {
            hits.push(id.clone());
        }
    }
    hits.sort();
    (hits.len() as f64 / t.len() as f64, hits)
}

fn oracle_case(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let f = fixture(rng);
    let split = Split::ALL[rng.random_range(0..3)];
    let master = random_face(rng, f.gallery.width(), f.gallery.height());
    let templates = brute_templates(&f.gallery, split);

    // mean_score
    let brute_mean = templates
        .iter()
        .map(|(_, t)| f.model.face_matching(&master, t).unwrap().score)
        .sum::<f64>()
        / templates.len() as f64;
    let lib = mean_score(
        &master,
        &f.gallery.enrolled_templates(split).unwrap(),
        &f.model,
    )
    .unwrap();
    let cached = TemplateSet::new(&f.model, &templates)
        .unwrap()
        .mean_score(&f.model, &master)
        .unwrap();
    if lib != brute_mean || cached != brute_mean {
        return Err(format!("mean_score {lib} / {cached} vs {brute_mean}"));
    }

    // compute_fmr, with tau sometimes sitting exactly on a score
    let scores: Vec<f64> = templates
        .iter()
        .map(|(_, t)| f.model.face_matching(&master, t).unwrap().score)
        .collect();
    let tau = if rng.random_bool(0.5) {
        scores[rng.random_range(0..scores.len())]
    } else {
        rng.random_range(-1.0..1.0)
    };
    let threshold = DecisionThreshold {
        tau,
        eer: 0.1,
        model_tag: "m".into(),
        calibration_tag: "fixture".into(),
    };
    let rep = compute_fmr(&master, &f.gallery, split, &f.model, &threshold).unwrap();
    let (fmr, hits) = brute_fmr(&f, &master, split, tau);
    let mut got: Vec<String> = rep.matched.iter().map(|m| m.identity.clone()).collect();
    got.sort();
    if rep.fmr != fmr || got != hits || rep.enrolled != templates.len() {
        return Err(format!("compute_fmr {} vs {fmr}", rep.fmr));
    }

    // wolf_attack_probability
    let k = f.decoder.latent_dim();
    let records: Vec<MasterFaceRecord> = (0..rng.random_range(1..5))
        .map(|i| {
            let z =
                LatentVector::new((0..k).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            MasterFaceRecord {
                iteration: i,
                seed: 0,
                mean_score: 0.0,
                digest: f.decoder.generate(&z).unwrap().digest(),
                latent: z,
            }
        })
        .collect();
    let wap = wolf_attack_probability(
        &records, &f.decoder, &f.gallery, split, &f.model, &threshold,
    )
    .unwrap();
    let brute_wap = records
        .iter()
        .map(|r| brute_fmr(&f, &f.decoder.generate(&r.latent).unwrap(), split, tau).0)
        .fold(0.0, f64::max);
    if wap != brute_wap {
        return Err(format!("wap {wap} vs {brute_wap}"));
    }

    // get_best_face, with ties from a coarse score grid
    let n = rng.random_range(1..8);
    let faces: Vec<FaceImage> = (0..n).map(|_| master.clone()).collect();
    let s: Vec<f64> = (0..n)
        .map(|_| rng.random_range(-3..3) as f64 / 2.0)
        .collect();
    let mut bi = 0;
    for i in 1..n {
        if s[i] > s[bi] {
            bi = i;
        }
    }
    if get_best_face(&faces, &s).unwrap() != (bi, s[bi]) {
        return Err(format!("get_best_face on {s:?}"));
    }
    Ok(())
}

#[test]
fn criterion_8_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = Vec::new();
    for case in 0..1000 {
        if let Err(e) = oracle_case(&mut rng) {
            failures.push(format!("case {case}: {e}"));
        }
    }
    verdict(
        8,
        "oracle equivalence",
        failures.is_empty(),
        &format!(
            "1000 cases, {} mismatches {:?}",
            failures.len(),
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    );
}
