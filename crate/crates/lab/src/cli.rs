//! The `semidiff` command line.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{ExperimentConfig, OUT_ENV};
use crate::error::{exit, LabError};
use crate::{experiment, report, runner};

#[derive(Debug, Parser)]
#[command(name = "semidiff", version, about = "Two-stage semi-supervised training of conditional diffusion models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment configuration and write its results directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run this single seed instead of the configured list.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Worker threads (default: available cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Validate the configuration and print the resolved plan only.
        #[arg(long)]
        dry_run: bool,
        /// Results directory (overrides the config's `out`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a results directory into report_long.csv and summary.md.
    Report {
        dir: PathBuf,
        /// Where to write the report (default: the results directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Executes a parsed command, printing progress on stdout.
pub fn execute(cli: Cli) -> Result<(), LabError> {
    match cli.command {
        Command::Run { config, seed_override, workers, dry_run, out } => {
            let cfg = ExperimentConfig::load(&config)?.with_seed_override(seed_override);
            let root = std::env::var_os(OUT_ENV).map(PathBuf::from);
            let dir = cfg.output_dir(out.as_deref(), root.as_deref());
            if dry_run {
                println!("config hash {}", cfg.hash());
                for line in cfg.plan() {
                    println!("{line}");
                }
                println!("output {}", dir.display());
                println!("{}", serde_json::to_string_pretty(&cfg).expect("configuration serializes"));
                return Ok(());
            }
            let pool = runner::pool(workers)?;
            log::info!("running {} into {}", cfg.mode.as_str(), dir.display());
            let out = pool.install(|| experiment::run(&cfg, &dir))?;
            println!("{}", out.dir.display());
            Ok(())
        }
        Command::Report { dir, out } => {
            let r = report::build(&dir)?;
            let target = out.unwrap_or_else(|| dir.clone());
            r.write(&target)?;
            println!("{}", target.join(report::SUMMARY).display());
            Ok(())
        }
    }
}

/// Runs the command line and returns the process exit code; errors are
/// reported as one JSON object on stderr.
pub fn main_with(cli: Cli) -> i32 {
    match execute(cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e.report()).expect("report serializes"));
            e.exit_code()
        }
    }
}
