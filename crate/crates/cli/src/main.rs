//! `freqlens`: config-driven training, evaluation and analysis runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Axis;

#[derive(Parser, Debug)]
#[command(
    name = "freqlens",
    version,
    about = "Adversarial robustness experiments through a frequency lens"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; replaces `output_dir` from the config.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SpectraMode {
    /// Spectra of clean inputs, attacked inputs and their difference.
    InputDiff,
    /// Per-row spectra of every weighted layer's kernel.
    Kernel,
    /// LFI/HFI ratio of the stem activation on the probe batch.
    ActivationRatio,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its checkpoint and per-epoch reports.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy of a checkpoint under each configured attack.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Ideal low-pass filter in front of the model (`eval.lpf_degree`).
        #[arg(long)]
        lpf_degree: Option<usize>,
        /// Attacks see the unfiltered model (`eval.oblivious`).
        #[arg(long)]
        oblivious: bool,
        /// Comma-separated attack columns, e.g. `natural,pgd-20` (`eval.attacks`).
        #[arg(long, value_delimiter = ',')]
        attacks: Vec<String>,
    },
    /// Fourier spectra of inputs, kernels or activations.
    Spectra {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: SpectraMode,
        /// Checkpoint(s); `activation-ratio` accepts several.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Attack for `input-diff`, e.g. `pgd-20` or `gn` (`eval.diff_attack`).
        #[arg(long)]
        attack: Option<String>,
        /// `eval.diff_mode`.
        #[arg(long, value_parser = ["of-difference", "of-spectra"])]
        diff_mode: Option<String>,
    },
    /// Layer-by-layer linear CKA similarity of a checkpoint.
    Cka {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feed attacked examples instead of clean ones (`eval.cka_attack`).
        #[arg(long)]
        attack: Option<String>,
        /// Use conv/linear outputs before batch norm and activation.
        #[arg(long)]
        pre_activation: bool,
        /// Comma-separated layer names (`eval.cka_layers`).
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
    },
    /// One row per value of a config axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Option<Axis>,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Model for `lpf_degree` sweeps; trained from the config otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print a checkpoint's metadata.
    InspectCheckpoint {
        path: PathBuf,
        /// Print the raw metadata JSON.
        #[arg(long)]
        json: bool,
    },
}

/// Why a command stopped; each maps to a distinct exit code.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    PartialSweep { failed: usize, total: usize },
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::PartialSweep { .. } => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "config error: {e:#}"),
            Failure::Runtime(e) => write!(f, "runtime error: {e:#}"),
            Failure::PartialSweep { failed, total } => write!(f, "{failed} of {total} sweep rows failed"),
        }
    }
}

pub trait Classify<T> {
    fn config(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("FREQLENS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::Config(anyhow::anyhow!(
            "FREQLENS_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    freqlens::par::init_threads(n);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    match cli.command {
        Command::Train { common } => commands::train(&common),
        Command::Eval {
            common,
            checkpoint,
            lpf_degree,
            oblivious,
            attacks,
        } => commands::eval(&common, &checkpoint, lpf_degree, oblivious, &attacks),
        Command::Spectra {
            common,
            mode,
            checkpoint,
            attack,
            diff_mode,
        } => commands::spectra(&common, mode, &checkpoint, attack.as_deref(), diff_mode.as_deref()),
        Command::Cka {
            common,
            checkpoint,
            attack,
            pre_activation,
            layers,
        } => commands::cka(&common, &checkpoint, attack.as_deref(), pre_activation, &layers),
        Command::Sweep {
            common,
            axis,
            values,
            checkpoint,
        } => commands::sweep(&common, axis, &values, checkpoint.as_deref()),
        Command::InspectCheckpoint { path, json } => commands::inspect(&path, json),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("freqlens: {f}");
            ExitCode::from(f.code())
        }
    }
}
