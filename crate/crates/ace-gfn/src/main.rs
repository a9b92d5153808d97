use std::process::ExitCode;

use clap::Parser;

use ace_gfn::cli::{execute, Cli};
use ace_gfn::AceError;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                AceError::Config(_) => 2,
                AceError::TrainingAborted { .. } | AceError::RunsFailed { .. } => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
