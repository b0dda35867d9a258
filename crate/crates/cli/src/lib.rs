//! Config-driven command-line front end for the land-use segmentation pipeline.

pub mod artifacts;
pub mod config;
pub mod stages;

pub use config::{ConfigError, ExperimentConfig};

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::json;
use tracing_subscriber::EnvFilter;

use crate::artifacts::OutputLock;

/// Environment variable holding the log filter (e.g. `debug`, `lulc_cli=trace`).
pub const LOG_ENV: &str = "LULC_LOG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_STAGE_ERROR: i32 = 1;
pub const EXIT_CONFIG_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lulc", version, about = "Sparse-label land-use segmentation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    /// Experiment config (JSON).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Override a config value: `--set train.epochs=10` (value parsed as JSON when possible).
    #[arg(short = 's', long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Burn vector labels and NDVI into per-class masks and the merged label mask.
    Rasterize(RunArgs),
    /// Cut the raster and labels into training and evaluation chips.
    Chip(RunArgs),
    /// Train the configured regime and write checkpoints and history.
    Train(RunArgs),
    /// Per-chip class probabilities (ensembled for cps).
    Predict(RunArgs),
    /// Merge probability chips into mosaic GeoTIFFs.
    Merge(RunArgs),
    /// Per-class recall at the configured thresholds.
    Evaluate(RunArgs),
    /// Generate a synthetic scene with dense truth and sparse labels.
    Synth(RunArgs),
    /// rasterize, chip, train, predict, merge and evaluate in order.
    Pipeline(RunArgs),
    /// Print the resolved config without running anything.
    Config(RunArgs),
}

impl Command {
    fn args(&self) -> &RunArgs {
        match self {
            Self::Rasterize(a)
            | Self::Chip(a)
            | Self::Train(a)
            | Self::Predict(a)
            | Self::Merge(a)
            | Self::Evaluate(a)
            | Self::Synth(a)
            | Self::Pipeline(a)
            | Self::Config(a) => a,
        }
    }

    fn stages(&self) -> Vec<&'static str> {
        match self {
            Self::Rasterize(_) => vec!["rasterize"],
            Self::Chip(_) => vec!["chip"],
            Self::Train(_) => vec!["train"],
            Self::Predict(_) => vec!["predict"],
            Self::Merge(_) => vec!["merge"],
            Self::Evaluate(_) => vec!["evaluate"],
            Self::Synth(_) => vec!["synth"],
            Self::Pipeline(_) => stages::PIPELINE.to_vec(),
            Self::Config(_) => vec![],
        }
    }
}

/// Installs the JSON-lines stderr logger; safe to call more than once.
pub fn init_logging() {
    let filter = EnvFilter::try_from_env(LOG_ENV).unwrap_or_else(|_| EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt().json().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

fn report_error(kind: &str, stage: Option<&str>, message: &str, code: i32) {
    let line = json!({"error": {"kind": kind, "stage": stage, "message": message, "exit_code": code}});
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn stage_error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<lulc_core::Error>().map(lulc_core::Error::kind))
        .or_else(|| e.chain().find_map(|c| c.downcast_ref::<std::io::Error>().map(|_| "io")))
        .unwrap_or("stage")
}

/// Runs one command and returns the process exit status.
///
/// Config errors exit with 2 before anything is written; stage failures exit with 1.
/// Both print a one-line JSON error object to stderr.
pub fn run(cli: &Cli) -> i32 {
    let args = cli.command.args();
    let cfg = match ExperimentConfig::load(&args.config, &args.overrides) {
        Ok(c) => c,
        Err(e) => {
            report_error(e.kind(), None, &e.to_string(), EXIT_CONFIG_ERROR);
            return EXIT_CONFIG_ERROR;
        }
    };
    if matches!(cli.command, Command::Config(_)) {
        print!("{}", cfg.to_json());
        return EXIT_OK;
    }
    let _lock = match OutputLock::acquire(cfg.output_dir()) {
        Ok(l) => l,
        Err(e) => {
            report_error("locked", None, &e.to_string(), EXIT_STAGE_ERROR);
            return EXIT_STAGE_ERROR;
        }
    };
    for stage in cli.command.stages() {
        tracing::info!(stage, "starting");
        match stages::run_stage(stage, &cfg) {
            Ok(summary) => println!("{summary}"),
            Err(e) => {
                let msg = format!("{e:#}");
                tracing::error!(stage, error = %msg, "stage failed");
                report_error(stage_error_kind(&e), Some(stage), &msg, EXIT_STAGE_ERROR);
                return EXIT_STAGE_ERROR;
            }
        }
    }
    EXIT_OK
}

/// Exit status of `run` for a given argument vector; usage errors exit with 2 as clap does.
pub fn run_from_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(argv) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_command_parses() {
        for cmd in ["rasterize", "chip", "train", "predict", "merge", "evaluate", "synth", "pipeline", "config"] {
            let cli = Cli::try_parse_from(["lulc", cmd, "--config", "c.json", "--set", "train.epochs=2"]).unwrap();
            assert_eq!(cli.command.args().overrides, vec!["train.epochs=2".to_string()]);
        }
        assert!(Cli::try_parse_from(["lulc", "bogus"]).is_err());
    }

    #[test]
    fn pipeline_runs_stages_in_order() {
        let cli = Cli::try_parse_from(["lulc", "pipeline", "-c", "c.json"]).unwrap();
        assert_eq!(cli.command.stages(), ["rasterize", "chip", "train", "predict", "merge", "evaluate"]);
    }

    #[test]
    fn config_errors_have_kinds() {
        let e = ConfigError::Override("x".into());
        assert_eq!(e.kind(), "config_override");
    }
}
