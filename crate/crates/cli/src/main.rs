//! `cbt`: fixtures, calibration, evaluation and α sweeps from the shell.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for data and
//! format errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "cbt",
    version,
    about = "Early-exit segmentation with class-based thresholds"
)]
struct Cli {
    /// JSON file with run parameters; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct InputArgs {
    /// EENW weights.
    #[arg(long)]
    model: Option<PathBuf>,
    /// EESD dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Label excluded from statistics [default: 255].
    #[arg(long)]
    ignore_label: Option<u8>,
    /// Treat every label as a class id.
    #[arg(long, conflicts_with = "ignore_label")]
    no_ignore: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write fixture weights, oracle weights and a synthetic dataset.
    GenerateFixtures {
        /// Output directory [default: fixtures].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Derive per-class thresholds from a labelled dataset.
    Calibrate {
        #[command(flatten)]
        inputs: InputArgs,
        #[arg(long)]
        alpha: Option<f64>,
        /// [default: 0.998]
        #[arg(long)]
        beta: Option<f64>,
        /// Thresholds JSON [default: thresholds.json].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run adaptive inference and report per-exit mIoU and GFLOPs.
    Evaluate {
        #[command(flatten)]
        inputs: InputArgs,
        /// `dense`, `uniform:<t>` or `cbt:<thresholds.json>`.
        #[arg(long)]
        policy: Option<String>,
        /// Report JSON; a CSV is written next to it [default: report.json].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate once, then evaluate CBT for each alpha and the uniform baseline.
    Sweep {
        #[command(flatten)]
        inputs: InputArgs,
        /// Comma-separated [default: 0.7,0.8,0.9,0.95,0.99].
        #[arg(long = "alpha", value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        /// [default: 0.998]
        #[arg(long)]
        beta: Option<f64>,
        /// Output directory [default: sweep].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl InputArgs {
    fn apply(self, c: &mut RunConfig) {
        c.model = self.model;
        c.dataset = self.dataset;
        c.ignore_label = self.ignore_label;
        c.ignore = self.no_ignore.then_some(false);
    }
}

impl Cli {
    fn into_parts(self) -> (Option<PathBuf>, RunConfig) {
        let mut c = RunConfig {
            jobs: self.jobs,
            seed: self.seed,
            ..Default::default()
        };
        let name = match self.command {
            Command::GenerateFixtures { out } => {
                c.out = out;
                "generate-fixtures"
            }
            Command::Calibrate {
                inputs,
                alpha,
                beta,
                out,
            } => {
                inputs.apply(&mut c);
                (c.alpha, c.beta, c.out) = (alpha, beta, out);
                "calibrate"
            }
            Command::Evaluate {
                inputs,
                policy,
                out,
            } => {
                inputs.apply(&mut c);
                (c.policy, c.out) = (policy, out);
                "evaluate"
            }
            Command::Sweep {
                inputs,
                alphas,
                beta,
                out,
            } => {
                inputs.apply(&mut c);
                (c.alphas, c.beta, c.out) = (alphas, beta, out);
                "sweep"
            }
        };
        c.command = Some(name.to_string());
        (self.config, c)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (file, flags) = cli.into_parts();
    let cfg = match file {
        Some(path) => RunConfig::load(&path)?.overlay(flags),
        None => flags,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.unwrap_or(0))
        .build()
        .map_err(|e| cbt_core::Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match cfg.command.as_deref() {
        Some("generate-fixtures") => commands::generate_fixtures(&cfg),
        Some("calibrate") => commands::calibrate(&cfg),
        Some("evaluate") => commands::evaluate_cmd(&cfg),
        Some("sweep") => commands::sweep(&cfg),
        other => Err(cbt_core::Error::Config(format!("unknown command {other:?}")).into()),
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use cbt_core::Error;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Usage(_) => 2,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
