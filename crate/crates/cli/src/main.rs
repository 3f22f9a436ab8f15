use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = advectant_cli::Cli::parse();
    let result = advectant_cli::init_threads().and_then(|()| advectant_cli::run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
