mod commands;

use std::process::ExitCode;

use clap::Parser;
use mitunet_core::ErrorCategory;

use commands::{Cli, CliError};

fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Usage(_) => 1,
        CliError::Core(e) => match e.category() {
            ErrorCategory::Usage => 1,
            ErrorCategory::Data => 2,
            ErrorCategory::Numeric => 3,
        },
        CliError::Failed(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
