use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use data_dividends::config::RunConfig;
use data_dividends::pipeline::{run_report, run_simulate, run_validate, PipelineError};

#[derive(Parser)]
#[command(name = "dividend-sim", version, about = "Simulate data-dividend policy designs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Value observations, allocate dividends per scenario and write reports.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare influence estimates against exact leave-one-out retraining.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-render summaries from a finished simulation directory.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Simulate { config } => {
            let cfg = RunConfig::load(&config)?;
            let files = run_simulate(&cfg)?;
            println!("wrote {} files to {}", files.len(), cfg.output_dir.display());
        }
        Command::Validate { config } => {
            let cfg = RunConfig::load(&config)?;
            let path = run_validate(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Report { input } => {
            let files = run_report(&input)?;
            println!("re-rendered {} files in {}", files.len(), input.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
