//! Command-line entry point.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use super::config::{Mode, RunConfig};
use super::run::{report, Run, ENV_THREADS};
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "splitguard",
    version,
    about = "Privacy-aware partition and compression search for split inference"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the dataset and train the base model.
    TrainBase(ConfigArg),
    /// Policy-gradient search over partitions and compressions.
    Search(ConfigArg),
    /// Grid search over the same strategy space.
    Grid(ConfigArg),
    /// Gaussian feature-noise baseline.
    DpBaseline(ConfigArg),
    /// Retrain and attack the configured strategy.
    Attack(ConfigArg),
    /// Rebuild summary tables and plots from run logs.
    Report {
        /// Run directories to compare.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Output directory; defaults to the first run.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn threads(cfg: Option<&RunConfig>) -> Result<()> {
    let n = match std::env::var(ENV_THREADS) {
        Ok(v) => Some(v.parse::<usize>().map_err(|_| {
            Error::Config(format!(
                "{ENV_THREADS} must be a positive integer, got {v:?}"
            ))
        })?),
        Err(_) => cfg.and_then(|c| c.threads),
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config(format!("{ENV_THREADS} must be positive")));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

fn load(arg: &ConfigArg, mode: Mode) -> Result<Run> {
    let Some(path) = &arg.config else {
        return Err(Error::Config(format!("{mode} requires --config <path>")));
    };
    let cfg = RunConfig::load(path)?;
    threads(Some(&cfg))?;
    Run::prepare(cfg, mode)
}

pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::TrainBase(a) => {
            let run = load(&a, Mode::TrainBase)?;
            run.train_base()?;
            Ok(format!("base models written to {}", run.dir.display()))
        }
        Command::Search(a) => {
            let run = load(&a, Mode::Search)?;
            let s = run.search()?;
            Ok(format!("best strategy {s} ({})", run.dir.display()))
        }
        Command::Grid(a) => {
            let run = load(&a, Mode::Grid)?;
            let s = run.grid()?;
            Ok(format!("best strategy {s} ({})", run.dir.display()))
        }
        Command::DpBaseline(a) => {
            let run = load(&a, Mode::DpBaseline)?;
            run.dp_baseline()?;
            Ok(format!("noise baseline written to {}", run.dir.display()))
        }
        Command::Attack(a) => {
            let run = load(&a, Mode::Attack)?;
            run.attack()?;
            Ok(format!("attack results written to {}", run.dir.display()))
        }
        Command::Report { runs, out } => {
            threads(None)?;
            report(&runs, out.as_deref())?;
            Ok("report written".to_string())
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
