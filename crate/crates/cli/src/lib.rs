//! Command-line front end: configuration, weight files and subcommands.

pub mod commands;
pub mod config;
pub mod weights;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::Split;
use config::{extract_overrides, RunConfig};
use weights::CrcMismatch;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CHECK: i32 = 2;

/// Any `--section.key value` (or `--section.key=value`) overrides the
/// matching configuration entry.
#[derive(Debug, Parser)]
#[command(name = "sfanet", version, about = "Train, evaluate and benchmark a small semantic segmentation network")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sets both the training seed and the scene seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Generate the synthetic dataset.
    GenData,
    /// Train a model on the generated dataset.
    Train {
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-class IoU and mIoU of a weight file.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Segment one PPM image into a PGM label map.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time single-image inference.
    Bench {
        /// Random initialization when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, hide = true)]
        no_fold: bool,
    },
    /// Compare analytic and numerical gradients.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_conv_fault: bool,
    },
}

enum Outcome {
    Done,
    CheckFailed,
}

fn effective_config(cli: &Cli, overrides: &[(String, String)]) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.data.scene.seed = seed;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli, cfg: &RunConfig, out: &mut dyn Write) -> anyhow::Result<Outcome> {
    match &cli.command {
        Command::Config => write!(out, "{}", cfg.to_toml())?,
        Command::GenData => {
            let m = commands::gen_data(cfg, cli.force)?;
            writeln!(
                out,
                "wrote {} scenes ({} train, {} val) to {}",
                m.count,
                m.train[1] - m.train[0],
                m.val[1] - m.val[0],
                cfg.paths.dataset_dir.display()
            )?;
        }
        Command::Train { resume } => {
            let s = commands::train(cfg, resume.as_deref(), cli.force, out)?;
            writeln!(out, "weights: {}", s.weights.display())?;
        }
        Command::Eval { weights, split } => {
            commands::eval(cfg, weights, *split, out)?;
        }
        Command::Infer { weights, image, out: path } => {
            commands::infer(cfg, weights, image, path)?;
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::Bench { weights, no_fold } => {
            commands::bench(cfg, weights.as_deref(), !no_fold, out)?;
        }
        Command::Gradcheck { inject_conv_fault } => {
            if !commands::gradcheck(*inject_conv_fault, out)? {
                return Ok(Outcome::CheckFailed);
            }
        }
    }
    Ok(Outcome::Done)
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run(args: Vec<String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let (rest, overrides) = match extract_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    let result = effective_config(&cli, &overrides).and_then(|cfg| dispatch(&cli, &cfg, out));
    match result {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::CheckFailed) => EXIT_CHECK,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            if e.chain().any(|c| c.is::<CrcMismatch>()) {
                EXIT_CHECK
            } else {
                EXIT_USAGE
            }
        }
    }
}
