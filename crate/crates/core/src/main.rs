use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use air_core::harness::{self, HarnessError, RunConfig, RunReport};
use air_core::modelio::ModelClient;
use air_core::templates::Templates;

type RunFn = fn(&RunConfig, &ModelClient, &Templates) -> Result<RunReport, HarnessError>;

#[derive(Parser)]
#[command(name = "air", version, about = "Induce, compile and refine rule-based system prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and evaluate the refined prompt on the test split.
    Fit { config: PathBuf },
    /// Evaluate a baseline on the same split.
    Baseline {
        #[arg(long, value_enum)]
        method: Method,
        config: PathBuf,
    },
    /// Print clusters, rule pools, step log and final prompt of a run.
    Inspect { dir: PathBuf },
    /// Print the score and token table of one run or all runs under a directory.
    Report { dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Initial,
    Knn,
}

fn run_with(config: &Path, f: RunFn) -> anyhow::Result<()> {
    let config = RunConfig::load(config)?;
    let client = config.client()?;
    let templates = config.templates()?;
    let report = f(&config, &client, &templates)?;
    println!(
        "{} {}: {:.2} on {} test examples ({:.1}s)",
        report.method,
        report.metric_kind.as_str(),
        report.metric,
        report.test_examples,
        report.wall_clock_secs
    );
    print!("{}", report.usage);
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit { config } => run_with(config, harness::run_air).context("fit"),
        Command::Baseline { method, config } => match method {
            Method::Initial => run_with(config, harness::run_initial_prompt).context("baseline initial"),
            Method::Knn => run_with(config, harness::run_knn).context("baseline knn"),
        },
        Command::Inspect { dir } => harness::inspect(dir).map(|s| print!("{s}")).map_err(Into::into),
        Command::Report { dir } => harness::report(dir).map(|s| print!("{s}")).map_err(Into::into),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
