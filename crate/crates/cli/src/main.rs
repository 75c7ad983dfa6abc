use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod output;
mod plot;
mod report;

use config::{Command, Overrides, RunConfig};
use error::CliError;

/// Bayesian elastic net on the empirical likelihood, sampled by tuned
/// HMC-within-Gibbs.
#[derive(Debug, Parser)]
#[command(name = "benel", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Clone, clap::Args)]
struct Common {
    /// TOML file of defaults; flags take precedence over its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: Overrides,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Fit a model to a delimited data file; writes report.json, draws.csv,
    /// tuner_trace.csv and optional SVG plots.
    Fit(Common),
    /// Run a simulation design for a number of replications and report
    /// MMSPE, bootstrap SE and exclusion frequencies.
    Simulate(Common),
    /// Run the step-size tuner alone and print its trace.
    Tune(Common),
    /// Split-R-hat, summaries and selection from an existing draws.csv.
    Diagnose(Common),
    /// Every sample-size and error cell of the first design (long running).
    Benchmark(Common),
    /// Full-Bayes fits over a grid of penalty hyperparameters.
    Sensitivity(Common),
    /// Check a JSON report against the current schema.
    Validate {
        report: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (command, common) = match cli.command {
        Sub::Fit(c) => (Command::Fit, c),
        Sub::Simulate(c) => (Command::Simulate, c),
        Sub::Tune(c) => (Command::Tune, c),
        Sub::Diagnose(c) => (Command::Diagnose, c),
        Sub::Benchmark(c) => (Command::Benchmark, c),
        Sub::Sensitivity(c) => (Command::Sensitivity, c),
        Sub::Validate { report } => {
            let text = std::fs::read_to_string(&report).map_err(|e| error::io_error("cannot read", &report, e))?;
            let kind = report::validate_report(&text)
                .map_err(|e| CliError::Schema(format!("{}: {e}", report.display())))?;
            println!("{}: valid {kind} report, schema version {}", report.display(), report::SCHEMA_VERSION);
            return Ok(());
        }
    };
    let cfg = RunConfig::resolve(command, common.flags, common.config.as_deref())?;
    let outputs = match command {
        Command::Fit => commands::fit(&cfg)?,
        Command::Simulate => commands::simulate(&cfg)?,
        Command::Tune => commands::tune(&cfg)?,
        Command::Diagnose => commands::diagnose(&cfg)?,
        Command::Benchmark => commands::benchmark(&cfg)?,
        Command::Sensitivity => commands::sensitivity(&cfg)?,
    };
    for path in outputs.write(&cfg.out_dir)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
