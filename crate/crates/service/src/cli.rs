//! The `clbd` command line.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use clbd_core::corpus::TaskKind;

use crate::config::{Config, CONFIG_ENV};
use crate::error::{Result, ServiceError};
use crate::manifest::Manifest;
use crate::{api, stages};

#[derive(Debug, Parser)]
#[command(name = "clbd", version, about = "Contextual literature-based discovery workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Log more (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Pipeline config (TOML). A flag given on the command line wins over the env var.
    #[arg(long, env = CONFIG_ENV, value_name = "FILE")]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest the corpus, extract instances and write temporal splits.
    BuildData(ConfigArg),
    /// Build the background knowledge graph.
    BuildKg(ConfigArg),
    /// Embed training targets into per-task semantic indexes.
    BuildIndex(ConfigArg),
    /// Train the configured trainable models.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Only this model.
        #[arg(long)]
        model: Option<String>,
    },
    /// Write test-split predictions for the configured runs.
    Predict {
        #[command(flatten)]
        config: ConfigArg,
        /// Only runs whose first model is this one.
        #[arg(long)]
        model: Option<String>,
    },
    /// Score predictions against references.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        /// Prediction file to score instead of the last `predict` outputs. Repeatable.
        #[arg(long, value_name = "FILE", requires = "task")]
        predictions: Vec<PathBuf>,
        /// Task of the files given with --predictions.
        #[arg(long, value_parser = parse_task)]
        task: Option<TaskKind>,
    },
    /// Neighbor similarity analyses and the multi-choice harness.
    Analyze(ConfigArg),
    /// Check the manifest chain of the workdir.
    Validate(ConfigArg),
    /// Serve the /v1 HTTP API.
    Serve {
        #[command(flatten)]
        config: ConfigArg,
        /// Overrides `serve.bind`.
        #[arg(long)]
        bind: Option<String>,
    },
}

fn parse_task(s: &str) -> std::result::Result<TaskKind, String> {
    s.parse().map_err(|e: clbd_core::Error| e.to_string())
}

fn report(m: &Manifest) {
    println!("{}: wrote {} artifact(s); manifest at manifests/{}.json", m.command, m.outputs.len(), m.command);
}

pub fn run(cli: Cli) -> Result<()> {
    let load = |c: &ConfigArg| Config::load(&c.config);
    match cli.command {
        Command::BuildData(c) => report(&stages::build_data(&load(&c)?)?),
        Command::BuildKg(c) => report(&stages::build_kg(&load(&c)?)?),
        Command::BuildIndex(c) => report(&stages::build_index(&load(&c)?)?),
        Command::Train { config, model } => report(&stages::train(&load(&config)?, model.as_deref())?),
        Command::Predict { config, model } => report(&stages::predict(&load(&config)?, model.as_deref())?),
        Command::Evaluate { config, predictions, task } => {
            let explicit: Vec<(TaskKind, PathBuf)> = match task {
                Some(t) => predictions.into_iter().map(|p| (t, p)).collect(),
                None => Vec::new(),
            };
            report(&stages::evaluate(&load(&config)?, &explicit)?)
        }
        Command::Analyze(c) => report(&stages::analyze(&load(&c)?)?),
        Command::Validate(c) => {
            let r = stages::validate(&load(&c)?)?;
            println!("manifest chain ok: {} manifest(s), {} artifact(s) checked", r.manifests.len(), r.artifacts_checked);
        }
        Command::Serve { config, bind } => {
            let cfg = load(&config)?;
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(ServiceError::from)?;
            rt.block_on(api::serve(cfg, bind))?;
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 2 on usage errors, 1 on failures.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn main() -> i32 {
    main_with(std::env::args_os())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn predictions_need_a_task() {
        let r = Cli::try_parse_from(["clbd", "evaluate", "--config", "c.toml", "--predictions", "p.jsonl"]);
        assert!(r.is_err());
        let r = Cli::try_parse_from(["clbd", "evaluate", "--config", "c.toml", "--predictions", "p.jsonl", "--task", "node"]);
        assert!(r.is_ok());
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let e = Cli::try_parse_from(["clbd", "train", "--config", "c.toml", "--bogus"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
