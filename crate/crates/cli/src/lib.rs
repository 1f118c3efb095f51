//! Command-line front end for the toy anchor-box detector.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod tables;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "dabdetr", version, about = "Dynamic anchor-box DETR on synthetic rectangle scenes")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by commands that build a config.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON config file; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Alias for `--seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Alias for `--train.steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Further `--dotted.key value` overrides, e.g. `--model.decoder.temperature 10`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write its checkpoint and metric log.
    Train {
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on freshly generated validation scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of validation scenes (defaults to the training config's value).
        #[arg(long)]
        n_scenes: Option<usize>,
        /// Data seed (defaults to the training seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Config the checkpoint must agree with.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Positional, content and combined cross-attention maps for selected queries.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed of the scene stream.
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
        #[arg(long, default_value_t = 0)]
        scene_index: u64,
        /// Query indices; defaults to the three highest-scoring queries.
        #[arg(long, value_delimiter = ',')]
        queries: Vec<usize>,
        #[arg(long, default_value = "runs/attention")]
        out: PathBuf,
    },
    /// Train one model per temperature and tabulate AP and positional-map entropy.
    SweepTemperature {
        #[arg(long, value_delimiter = ',', default_values_t = dabdetr_core::toy::experiments::DEFAULT_TEMPERATURES)]
        temps: Vec<f64>,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the five ablation configurations over several seeds.
    Ablate {
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Export the learned first-layer anchors.
    VizAnchors {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "runs/anchors")]
        out: PathBuf,
    },
    /// Write generated scenes as PGM images plus a JSON-lines box sidecar.
    DumpScenes {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        count: u64,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[arg(long, default_value = "runs/scenes")]
        out: PathBuf,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum SplitArg {
    Train,
    Val,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { out, cfg } => commands::train(&out, &cfg),
        Command::Eval {
            checkpoint,
            n_scenes,
            seed,
            config,
            out,
        } => commands::eval(&checkpoint, n_scenes, seed, config.as_deref(), &out),
        Command::DumpAttention {
            checkpoint,
            scene_seed,
            scene_index,
            queries,
            out,
        } => commands::dump_attention(&checkpoint, scene_seed, scene_index, &queries, &out),
        Command::SweepTemperature { temps, out, cfg } => commands::sweep_temperature(&temps, &out, &cfg),
        Command::Ablate { seeds, out, cfg } => commands::ablate(&seeds, &out, &cfg),
        Command::VizAnchors { checkpoint, out } => commands::viz_anchors(&checkpoint, &out),
        Command::DumpScenes {
            seed,
            count,
            split,
            out,
        } => commands::dump_scenes(seed, count, split, &out),
    }
}

/// Parses `std::env::args`, runs the command and maps errors to exit codes.
pub fn main_entry() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
