//! Command-line interface: data generation, training, evaluation, the
//! ablation battery, and attention export.
//!
//! Every subcommand takes an explicit seed, writes outputs atomically
//! (overwrite semantics), and embeds the fully resolved configuration into
//! its JSON outputs. Exit codes: 0 success, 1 usage, 2 data/format,
//! 3 numerical failure. `STN_THREADS` caps worker parallelism (0 = auto).

mod commands;
mod errors;

use clap::error::ErrorKind;
use clap::Parser;
use commands::Cli;

use std::process::ExitCode;

fn main() -> ExitCode {
    let threads = std::env::var("STN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    stn_core::init_parallelism(threads);

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("usage error: {}", e.render());
            return ExitCode::from(1);
        }
    };

    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code())
        }
    }
}
