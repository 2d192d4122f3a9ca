use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use mfglab::cli::{self, RunConfig};

/// Batch driver for the stationary mean-field-game laboratory.
#[derive(Parser)]
#[command(name = "mfglab", version, about)]
struct Args {
    /// Flat key=value run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for sweep mode.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory, overriding out.dir from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Err(e) = cli::init_logging() {
        eprintln!("error: {e}");
        return ExitCode::from(cli::EXIT_CONFIG as u8);
    }
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", args.config.display());
            return ExitCode::from(cli::EXIT_CONFIG as u8);
        }
    };
    let mut config = match RunConfig::parse(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(cli::EXIT_CONFIG as u8);
        }
    };
    if let Some(out) = args.out {
        config.out_dir = out;
    }
    ExitCode::from(cli::run(&config, args.jobs) as u8)
}
