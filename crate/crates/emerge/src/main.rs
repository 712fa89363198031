use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = emerge::cli::Cli::parse();
    match emerge::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
