use std::process::ExitCode;

use clap::Parser;
use flownet_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
