use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gatecal_cli::commands::{self, SweepAxis};
use gatecal_cli::{ExperimentConfig, Failure};

#[derive(Parser)]
#[command(name = "gatecal", version, about = "Test-time calibration of frozen forecasters")]
struct Cli {
    /// Flat `key = value` config file; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a backbone per horizon and write checkpoints.
    Train {
        /// Overwrite existing checkpoints.
        #[arg(long)]
        force: bool,
    },
    /// Stream the test split through each method and write results.
    Adapt,
    /// Vary one hyperparameter of the PETSA run.
    Sweep {
        #[arg(value_enum)]
        axis: SweepAxis,
    },
    /// Rebuild the tables from existing result files.
    Report,
    /// Print the resolved configuration.
    Config,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    match cli.command {
        Command::Train { force } => {
            for t in commands::train(&cfg, force)? {
                println!("H={}\tval_mse={}\t{}", t.horizon, t.val_mse, t.checkpoint.display());
            }
        }
        Command::Adapt => {
            let paths = commands::adapt(&cfg)?;
            println!("wrote {} result files under {}", paths.len(), cfg.output_dir.display());
            print!("{}", commands::report(&cfg)?);
        }
        Command::Sweep { axis } => {
            let paths = commands::sweep(&cfg, axis)?;
            println!("wrote {} result files; table in {}", paths.len(), cfg.output_dir.join(format!("sweep_{}.tsv", axis.as_str())).display());
        }
        Command::Report => print!("{}", commands::report(&cfg)?),
        Command::Config => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(Failure::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gatecal: {e}");
            e.exit_code()
        }
    }
}
