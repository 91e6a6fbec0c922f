//! `distok`: build worlds, train, generate, evaluate and verify from the shell.
//!
//! Machine-readable output goes to stdout, progress and summaries to stderr.

mod commands;
mod error;
mod manifest;
mod names;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "distok", version, about = "Distribution-conditional creative tokens over a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutDir {
    /// Directory for written artifacts.
    #[arg(long, env = "DISTOK_OUT_DIR", default_value = "distok-out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct Inference {
    /// Directory written by `train`.
    model_dir: PathBuf,
    /// JSON object mapping aliases to concept names, e.g. {"cat": "c0"}.
    #[arg(long)]
    aliases: Option<PathBuf>,
    /// Write the result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the world described by a config and save it.
    InitWorld {
        #[arg(long)]
        config: PathBuf,
        /// Output file; defaults to world.json in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        dir: OutDir,
    },
    /// Train a model and write checkpoint, pool, metrics and manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        dir: OutDir,
    },
    /// Creative token for two concepts.
    Fuse {
        #[command(flatten)]
        io: Inference,
        /// Two concept names, e.g. c0,c3.
        #[arg(long)]
        pair: String,
    },
    /// Creative token for a distribution over known concepts.
    GenDist {
        #[command(flatten)]
        io: Inference,
        /// Comma-separated name:weight items, e.g. c0:0.5,c1:0.3,c2:0.2.
        #[arg(long)]
        dist: String,
    },
    /// Decode latents drawn from a standard distribution.
    Sample {
        /// Directory written by `train`.
        model_dir: PathBuf,
        /// gaussian, laplace, uniform or cauchy.
        #[arg(long, default_value = "gaussian")]
        kind: String,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Defaults to the training seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// KL between input distributions and the oracle labels of generated tokens.
    EvalKl {
        #[command(flatten)]
        io: Inference,
        /// `builtin` or a file with one distribution per line.
        #[arg(long, default_value = "builtin")]
        suite: String,
        #[command(flatten)]
        dir: OutDir,
    },
    /// Paired comparison of training with and without consistency supervision.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[command(flatten)]
        dir: OutDir,
    },
    /// Compare analytic gradients of every loss with finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Scale every analytic gradient by this factor.
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::InitWorld { config, out, dir } => {
            let out = out.unwrap_or_else(|| commands::default_world_path(&dir.out_dir));
            commands::init_world(&config, &out)
        }
        Command::Train { config, dir } => commands::train(&config, &dir.out_dir),
        Command::Fuse { io, pair } => commands::fuse(&io.model_dir, &pair, io.aliases.as_deref(), io.out.as_deref()),
        Command::GenDist { io, dist } => {
            commands::gen_dist(&io.model_dir, &dist, io.aliases.as_deref(), io.out.as_deref())
        }
        Command::Sample {
            model_dir,
            kind,
            count,
            seed,
            out,
        } => commands::sample(&model_dir, &kind, count, seed, out.as_deref()),
        Command::EvalKl { io, suite, dir } => {
            if io.out.is_some() {
                return Err(CliError::Usage("eval-kl writes into --out-dir; --out is not used".into()));
            }
            commands::eval_kl(&io.model_dir, &suite, io.aliases.as_deref(), &dir.out_dir)
        }
        Command::Ablate { config, seeds, dir } => commands::ablate(&config, &seeds, &dir.out_dir),
        Command::Gradcheck { config, inject_fault } => commands::gradcheck(&config, inject_fault),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
