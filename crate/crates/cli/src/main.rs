use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod config;
mod error;
mod fit;
mod manifest;
mod report;
mod simulate;

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "carmort", version, about = "Binomial CAR spatio-temporal models for county mortality panels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a lattice study and write its input files plus a fit config.
    Simulate(RunArgs),
    /// Fit every selected stratum and write draws, summaries and diagnostics.
    Fit(RunArgs),
    /// Convergence report for a draws file.
    Diagnose(DiagnoseArgs),
    /// Summaries and variable importance for a fit directory or draws file.
    Summarize(SummarizeArgs),
}

#[derive(Debug, Clone, Args)]
struct RunArgs {
    /// TOML configuration file (required by `fit`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

/// Flags that override configuration values.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated `AGE:SEX` strata, e.g. `45-49:female,45-49:male`.
    #[arg(long, value_delimiter = ',')]
    pub strata: Option<Vec<String>>,
    /// Maximum number of strata fitted concurrently.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// Saved draws per stratum.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Args)]
struct DiagnoseArgs {
    /// A `draws.csv` written by `fit`.
    draws: PathBuf,
    /// Run configuration; only its `[diagnostics]` table is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for `convergence.csv`; the report is only printed otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct SummarizeArgs {
    /// A `fit` output directory or a single `draws.csv`.
    input: PathBuf,
    /// Output directory [default: `<input>/summaries`].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => simulate::cmd_simulate(a.config.as_deref(), &a.overrides),
        Command::Fit(a) => {
            let path = a
                .config
                .ok_or_else(|| CliError::Invalid("fit needs --config".into()))?;
            let config = config::RunConfig::load(&path, &a.overrides)?;
            fit::cmd_fit(&config)
        }
        Command::Diagnose(a) => report::cmd_diagnose(&a.draws, a.config.as_deref(), a.out.as_deref()),
        Command::Summarize(a) => report::cmd_summarize(&a.input, a.out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("carmort: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
