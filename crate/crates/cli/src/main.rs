//! `voxfield`: synthesize scenes, train, bake, render and evaluate.

mod commands;

use std::process::ExitCode;

use clap::Parser;

use commands::{CliError, Command};

/// Worker threads for the parallel kernels; unset means one per core.
const THREADS_ENV: &str = "VOXFIELD_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "voxfield",
    version,
    about = "Sparse voxel radiance fields from sparse RGB-D views"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| {
        CliError::Usage(format!(
            "{THREADS_ENV} must be a positive integer, got {v:?}"
        ))
    })?;
    if n == 0 {
        return Err(CliError::Usage(format!("{THREADS_ENV} must be positive")));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| commands::run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
