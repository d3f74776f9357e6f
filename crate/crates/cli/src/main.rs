use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use sfagc::commands::{self, Scope};
use sfagc::io::{RunConfig, SynthKind, SynthOptions};

#[derive(Parser)]
#[command(name = "sfagc", version, about = "Point cloud classification and segmentation with SFAGC networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, value_parser = ["layer", "pool", "model"])]
        scope: String,
        /// Perturb the analytic gradient of this parameter.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long, value_parser = ["classify4", "segment2"])]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training shapes per class.
        #[arg(long)]
        train: Option<usize>,
        /// Test shapes per class.
        #[arg(long)]
        test: Option<usize>,
        /// Points per shape.
        #[arg(long)]
        points: Option<usize>,
        /// Rotate classify4 shapes uniformly in 3-D instead of about z.
        #[arg(long)]
        full_rotation: bool,
    },
    /// Sample points from an OFF mesh.
    ConvertOff {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const VALIDATION_FAILURE: u8 = 1;
const RUNTIME_FAILURE: u8 = 2;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<sfagc::Error>() {
        Some(
            sfagc::Error::Config(_)
            | sfagc::Error::Parse { .. }
            | sfagc::Error::InvalidArgument(_)
            | sfagc::Error::Checkpoint(_),
        ) => VALIDATION_FAILURE,
        _ => RUNTIME_FAILURE,
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let report = commands::train(&cfg, &mut std::io::stdout())?;
            println!("checkpoint {}", report.checkpoint.display());
            println!("metrics {}", report.metrics_log.display());
        }
        Command::Eval { checkpoint, data } => {
            print!("{}", commands::eval(&checkpoint, &data)?);
        }
        Command::Gradcheck { scope, corrupt } => {
            let report = commands::gradcheck(Scope::parse(&scope)?, corrupt.as_deref())?;
            print!("{report}");
            if !report.passed() {
                return Ok(VALIDATION_FAILURE);
            }
        }
        Command::Synth {
            kind,
            out,
            seed,
            train,
            test,
            points,
            full_rotation,
        } => {
            let mut opts = SynthOptions::default_for(SynthKind::parse(&kind)?);
            opts.train = train.unwrap_or(opts.train);
            opts.test = test.unwrap_or(opts.test);
            opts.points = points.unwrap_or(opts.points);
            opts.full_rotation |= full_rotation;
            let manifest = commands::synth(&kind, &out, seed, Some(opts))?;
            println!("{}", manifest.display());
        }
        Command::ConvertOff { input, n, out, seed } => {
            commands::convert_off(&input, n, &out, seed)?;
            println!("{}", out.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
