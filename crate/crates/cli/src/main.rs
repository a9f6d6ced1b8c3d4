use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

mod commands;

use commands::Outcome;

/// Temporal excitation and aggregation networks: analysis, checks and toy
/// training.
#[derive(Debug, Parser)]
#[command(name = "tea", version)]
pub struct Cli {
    /// Seed for every random choice; echoed into all outputs.
    #[arg(long, global = true, env = "TEA_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Also write the JSON report to this file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Symbolic MACs, parameters and temporal receptive field of a network.
    Analyze {
        /// Network spec file (JSON, same fields as `--preset` specs).
        spec: Option<PathBuf>,
        /// Built-in spec: resnet50-2d, resnet50-tea or toy.
        #[arg(long, conflicts_with = "spec")]
        preset: Option<String>,
        /// Frames per clip (default: the spec's own).
        #[arg(long)]
        frames: Option<usize>,
        /// Square input side (default: the spec's own).
        #[arg(long)]
        size: Option<usize>,
    },
    /// Compares the temporal shift with its fixed-kernel convolution.
    Equivalence {
        /// Channel counts to draw from; each must be a multiple of 8.
        #[arg(long, value_delimiter = ',', default_values_t = [8, 16, 64])]
        channels: Vec<usize>,
        /// Frame counts to draw from.
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 4, 5, 6, 7, 8])]
        frames: Vec<usize>,
        /// Number of random shapes.
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Runs the built-in property suite.
    Selfcheck {
        /// Flip the sign of convolution weight gradients (negative control).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Trains a toy network on synthetic motion clips.
    TrainToy {
        /// tea, plain2d, p21d-shift, me-only, mta-only or me-no-res.
        #[arg(long, default_value = "tea")]
        variant: String,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
        /// Dataset written by `gen-data`; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Where `metrics.json` and `model.tean` go
        /// (default: runs/<variant>-seed<seed>).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Threads for generating the in-memory dataset.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Scores a checkpoint on a manifest with centre-frame sampling.
    Eval {
        checkpoint: PathBuf,
        manifest: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Writes train and validation splits of synthetic clips.
    GenData {
        out_dir: PathBuf,
        /// Synthetic spec file (JSON); missing fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 125)]
        train_per_class: usize,
        #[arg(long, default_value_t = 50)]
        val_per_class: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

const EXIT_INVALID: u8 = 1;
const EXIT_PROPERTY: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_INVALID),
            };
        }
    };
    match commands::run(&cli) {
        Ok(Outcome::Passed) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(EXIT_PROPERTY),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INVALID)
        }
    }
}
