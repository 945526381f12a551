use std::process::ExitCode;

use clap::Parser;
use facetx::cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("facetx: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
