//! Command-line experiment runner.
//!
//! Exit codes: 0 on success, 1 on runtime failures, 2 on configuration
//! or schema errors. All experiment state lives in the config file;
//! environment variables are never consulted.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qmpnn::config::load_config;
use qmpnn::runner::{export_curve, run_experiment};
use qmpnn::Error;

#[derive(Parser)]
#[command(
    name = "qmpnn",
    version,
    about = "Quaternion message-passing GNN experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config file.
    Run {
        config: PathBuf,
        /// Replace the config's seed list (comma-separated).
        #[arg(long, value_name = "SEEDS")]
        seed_override: Option<String>,
        /// Replace the config's output directory.
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
    },
    /// Summarize a checkpoint directory.
    Inspect { checkpoint: PathBuf },
    /// Convert a results CSV into pruning-curve points.
    ExportCurve { results: PathBuf, out: PathBuf },
}

fn is_config_error(err: &Error) -> bool {
    matches!(err, Error::Config(_) | Error::Json(_))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            seed_override,
            out_dir,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seeds) = seed_override {
                cfg.seeds = seeds
                    .split(',')
                    .map(|s| {
                        s.trim().parse::<u64>().map_err(|_| {
                            Error::Config(format!("bad seed `{s}` in --seed-override"))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                cfg.validate()?;
            }
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            let out = run_experiment(&cfg)?;
            println!(
                "wrote {} rows to {}",
                out.rows.len(),
                out.csv_path.display()
            );
            Ok(())
        }
        Command::Inspect { checkpoint } => {
            print!("{}", qmpnn::checkpoint::inspect(&checkpoint)?);
            Ok(())
        }
        Command::ExportCurve { results, out } => {
            export_curve(&results, &out)?;
            println!("wrote curve to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if is_config_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
