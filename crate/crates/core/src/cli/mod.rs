//! Command-line front end.
//!
//! The `iegp` binary is a thin wrapper around [`main_with_args`]. Each
//! subcommand loads an optional TOML config, applies flag overrides, and
//! hands the resolved [`ExperimentConfig`] to [`run`].

mod config;
mod ingest;
mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{
    DictionaryConfig, ExperimentConfig, IoConfig, KernelEntry, ModeName, ReduceConfig, RegretConfig,
    SwitchRegretConfig, Task,
};
pub use ingest::{CsvSchema, CsvStream, StreamRecord};
pub use run::{run, RunSummary};

use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "iegp", version, about = "Streaming ensembles of random-feature GP experts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Online regression on a CSV stream (target in the last column by default).
    Regress(RunArgs),
    /// Online binary classification; labels may be 0/1 or -1/+1.
    Classify(RunArgs),
    /// Online nonlinear dimensionality reduction of every non-label column.
    Reduce(RunArgs),
    /// Static regret sweep on a synthetic stream.
    Regret(RunArgs),
    /// Switching regret sweep on a synthetic stream with one change point.
    Switchregret(RunArgs),
}

/// Flags shared by every subcommand. Each one overrides the config file.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// TOML experiment config.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Input CSV with a header row.
    #[arg(short, long)]
    pub input: Option<PathBuf>,
    /// Per-step metrics CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Summary JSON.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// SVG line chart of the main metric.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Write the final state here.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run on the same input.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many streamed rows.
    #[arg(long)]
    pub stop_after: Option<u64>,
    /// Target column name.
    #[arg(long)]
    pub target: Option<String>,
    /// Label column (reduce only; used for the 1-NN error).
    #[arg(long)]
    pub label: Option<String>,
    /// Export the embedding matrix as CSV (reduce only).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeName>,
    /// Self-transition probability of the switching modes.
    #[arg(long)]
    pub q0: Option<f64>,
    /// Random-walk variance of the dynamic modes.
    #[arg(long)]
    pub drift: Option<f64>,
    #[arg(long)]
    pub shutdown_threshold: Option<f64>,
    /// Random features per expert (the feature vector has twice as many entries).
    #[arg(long)]
    pub n_rf: Option<usize>,
    /// Initialization window length.
    #[arg(long)]
    pub t0: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Z-score inputs with statistics frozen from the initialization window.
    #[arg(long)]
    pub standardize: Option<bool>,
    /// Fit kernel hyperparameters on the initialization window.
    #[arg(long)]
    pub fit: Option<bool>,
    /// Dictionary exponents k (squared lengthscale 10^k), comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, overrides_with = "exponents")]
    pub exponents: Option<Vec<i32>>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Sweep lengths for the regret tasks, comma separated.
    #[arg(long, value_delimiter = ',', overrides_with = "lengths")]
    pub lengths: Option<Vec<usize>>,
    /// Number of seeds per sweep length.
    #[arg(long)]
    pub runs: Option<u64>,
}

impl RunArgs {
    /// Loads the config file (or defaults) and applies every given flag.
    pub fn resolve(&self, task: Task) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.task = task;
        let io = &mut cfg.io;
        macro_rules! set {
            ($($src:ident => $dst:expr),* $(,)?) => {$(
                if let Some(v) = &self.$src {
                    $dst = v.clone().into();
                }
            )*};
        }
        set!(
            input => io.input,
            metrics => io.metrics,
            summary => io.summary,
            svg => io.svg,
            checkpoint => io.checkpoint,
            resume => io.resume,
            stop_after => io.stop_after,
            target => io.target,
            label => io.label,
            embeddings => io.embeddings,
            mode => cfg.mode,
            q0 => cfg.q0,
            drift => cfg.drift,
            shutdown_threshold => cfg.shutdown_threshold,
            n_rf => cfg.n_rf,
            t0 => cfg.t0,
            seed => cfg.seed,
            standardize => cfg.standardize,
            fit => cfg.dictionary.fit,
            exponents => cfg.dictionary.exponents,
            latent_dim => cfg.reduce.latent_dim,
        );
        if let Some(l) = &self.lengths {
            cfg.regret.lengths = l.clone();
            cfg.switchregret.lengths = l.clone();
        }
        if let Some(r) = self.runs {
            cfg.regret.runs = r;
            cfg.switchregret.runs = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Command {
    pub fn task_and_args(&self) -> (Task, &RunArgs) {
        match self {
            Command::Regress(a) => (Task::Regress, a),
            Command::Classify(a) => (Task::Classify, a),
            Command::Reduce(a) => (Task::Reduce, a),
            Command::Regret(a) => (Task::Regret, a),
            Command::Switchregret(a) => (Task::Switchregret, a),
        }
    }
}

/// Parses `args`, runs the experiment and returns the process exit code.
/// Usage errors exit with 2, run failures with 1.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (task, args) = cli.command.task_and_args();
    match args.resolve(task).and_then(|cfg| run(&cfg)) {
        Ok(summary) => {
            log::info!("{task:?} finished: {} rows written to {}", summary.rows, summary.metrics.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_values() {
        let cli = Cli::try_parse_from([
            "iegp",
            "regress",
            "--input",
            "x.csv",
            "--n-rf",
            "7",
            "--exponents",
            "5",
            "--exponents",
            "-2,0,2",
            "--mode",
            "switching",
            "--q0",
            "0.9",
            "--standardize",
            "false",
        ])
        .unwrap();
        let (task, args) = cli.command.task_and_args();
        let cfg = args.resolve(task).unwrap();
        assert_eq!(cfg.task, Task::Regress);
        assert_eq!(cfg.n_rf, 7);
        assert_eq!(cfg.dictionary.exponents, vec![-2, 0, 2]);
        assert_eq!(cfg.ensemble_mode(), crate::ensemble::Mode::Switching { q0: 0.9 });
        assert!(!cfg.standardize);
        assert_eq!(cfg.io.input, Some(PathBuf::from("x.csv")));
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(main_with_args(["iegp", "frobnicate"]), 2);
        assert_eq!(main_with_args(["iegp", "regress"]), 1, "missing input is a config error");
    }
}
