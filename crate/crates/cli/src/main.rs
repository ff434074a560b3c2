//! `comer`: verification, training and feature export for the ViT-CoMer
//! backbone.
//!
//! Every command prints one `name: status: value: tolerance` line per check
//! and exits 0 when all checks pass, 1 when any fails and 2 on usage or
//! configuration errors.

mod commands;
mod pgm;
mod report;
mod run_config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use comer_core::{DType, Error, Variant};
use run_config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "comer", version, about = "ViT-CoMer verification, training and export")]
struct Cli {
    /// `key = value` run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Element type for shapes, training and export.
    #[arg(long, global = true)]
    dtype: Option<DType>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides a configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Forward a random image and check every level and token shape.
    Shapes,
    /// Central finite-difference check of every parameter gradient (f64).
    Gradcheck {
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
        /// Entries checked per tensor.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Compare the ViT token stream with a standalone plain ViT (f64).
    EquivInit {
        /// Set every gate to this value first.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Compare operators with brute-force loop implementations (f64).
    Oracle {
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Parameter counts and the overhead over a plain ViT.
    Params {
        #[arg(long)]
        variant: Option<Variant>,
        /// Also allocate the model and compare with the analytic count.
        #[arg(long)]
        allocate: bool,
    },
    /// Train on the synthetic segmentation set, writing loss.csv and a checkpoint.
    TrainToy {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Checkpoint path (default `<out>/toy.vcmr`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write channel-mean feature maps of each branch and level as PGM files.
    ExportFeatures {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// PGM/PPM file or built-in pattern (constant, gradient, checker, toy).
        #[arg(long)]
        image: Option<String>,
    },
}

fn run_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut rc = match &cli.config {
        Some(path) => RunConfig::from_text(&std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?)?,
        None => RunConfig::default(),
    };
    let overrides = cli
        .set
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    rc.apply(&overrides)?;
    if let Some(s) = cli.seed {
        rc.seed = s;
    }
    if let Some(d) = cli.dtype {
        rc.dtype = Some(d);
    }
    if let Some(o) = &cli.out {
        rc.out = o.clone();
    }
    match &cli.command {
        Command::Gradcheck { eps, tol, samples } => {
            rc.eps = eps.unwrap_or(rc.eps);
            rc.tol = tol.unwrap_or(rc.tol);
            rc.samples = samples.unwrap_or(rc.samples);
        }
        Command::Oracle { seeds } => rc.oracle_seeds = seeds.unwrap_or(rc.oracle_seeds),
        Command::TrainToy {
            steps,
            lr,
            momentum,
            batch_size,
            images,
            threshold,
            checkpoint,
        } => {
            let t = &mut rc.train;
            t.steps = steps.unwrap_or(t.steps);
            t.lr = lr.unwrap_or(t.lr);
            t.momentum = momentum.unwrap_or(t.momentum);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.images = images.unwrap_or(t.images);
            rc.threshold = threshold.unwrap_or(rc.threshold);
            if checkpoint.is_some() {
                rc.checkpoint = checkpoint.clone();
            }
        }
        Command::ExportFeatures { checkpoint, image } => {
            if checkpoint.is_some() {
                rc.checkpoint = checkpoint.clone();
            }
            if let Some(i) = image {
                rc.image = i.clone();
            }
        }
        Command::Shapes | Command::EquivInit { .. } | Command::Params { .. } => {}
    }
    if !matches!(cli.command, Command::Params { variant: Some(_), .. }) {
        rc.model.validate()?;
    }
    Ok(rc)
}

/// Configuration, input and file problems are usage errors; anything
/// raised while a check runs counts as a failed check.
fn is_usage_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_) | Error::Checkpoint(_) | Error::Io { .. } | Error::Dtype { .. }
    )
}

fn key_help() -> String {
    let mut s = String::from("Run configuration keys (besides the model keys):\n");
    for (k, d) in run_config::RUN_KEYS {
        s.push_str(&format!("  {k:<14}{d}\n"));
    }
    s
}

fn main() -> ExitCode {
    let matches = Cli::command().after_long_help(key_help()).get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    let result = run_config(&cli).and_then(|rc| match &cli.command {
        Command::Shapes => commands::shapes(&rc),
        Command::Gradcheck { .. } => commands::gradcheck(&rc),
        Command::EquivInit { alpha } => commands::equiv_init(&rc, *alpha),
        Command::Oracle { .. } => commands::oracle(&rc),
        Command::Params { variant, allocate } => commands::params(&rc, *variant, *allocate),
        Command::TrainToy { .. } => commands::train(&rc),
        Command::ExportFeatures { .. } => commands::export_features(&rc),
    });
    match result {
        Ok(report) => {
            // a closed pipe (`| head`) is not an error worth reporting
            let _ = write!(std::io::stdout().lock(), "{report}");
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_usage_error(&e) { 2 } else { 1 })
        }
    }
}
