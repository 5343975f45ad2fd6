use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use masterface_cli::pipeline::{cmd_attack, cmd_evaluate, cmd_report, cmd_synth, cmd_train};
use masterface_cli::{CliResult, Context, RunConfig};

#[derive(Parser)]
#[command(
    name = "masterface",
    version,
    about = "Master-face search by latent variable evolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic galleries (PGM images + manifest).
    Synth(Common),
    /// Train the decoder and matchers, calibrate thresholds.
    Train(Common),
    /// Run the latent variable evolution search.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Continue from a snapshot written by an earlier attack.
        #[arg(long, value_name = "SNAPSHOT")]
        resume: Option<PathBuf>,
    },
    /// FMR, histograms, trajectory and transfer matrix of the master face.
    Evaluate(Common),
    /// Merge all stage outputs into report.json.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory shared by all stages.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override the search seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of search iterations.
    #[arg(long)]
    iterations: Option<usize>,
}

impl Common {
    fn context(&self) -> CliResult<Context> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.lve.seed = seed;
        }
        if let Some(n) = self.iterations {
            config.lve.iterations = n;
        }
        config.validate()?;
        Ok(Context::new(config, self.out.clone()))
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(c) => {
            for path in cmd_synth(&c.context()?)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Train(c) => {
            let cal = cmd_train(&c.context()?)?;
            for t in &cal.thresholds {
                println!("{}: tau {:.6} eer {:.6}", t.model_tag, t.tau, t.eer);
            }
        }
        Command::Attack { common, resume } => {
            let m = cmd_attack(&common.context()?, resume.as_deref())?;
            println!(
                "best mean score {:.6} at iteration {}",
                m.best.mean_score, m.best.iteration
            );
        }
        Command::Evaluate(c) => {
            let (e, transfer) = cmd_evaluate(&c.context()?)?;
            println!(
                "{} split: fmr {:.6} ({} of {}), eer {:.6}, wap {:.6}",
                e.report.split,
                e.report.fmr,
                e.report.matched_count,
                e.report.enrolled,
                e.report.eer,
                e.wolf_attack_probability
            );
            if let Some(t) = transfer {
                for (cell, tag) in t.matrix.cells.iter().zip(&t.tags) {
                    println!(
                        "arch {:?} / db {:?} ({tag}): fmr {:.6} eer {:.6} success {}",
                        cell.architecture,
                        cell.database,
                        cell.report.fmr,
                        cell.report.eer,
                        cell.success
                    );
                }
            }
        }
        Command::Report(c) => {
            cmd_report(&c.context()?)?;
            println!("wrote {}", c.out.join("report.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}
