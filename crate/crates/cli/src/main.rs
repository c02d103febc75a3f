use std::process::ExitCode;

use clap::Parser;
use lfsamba_cli::{run, Cli, Precision};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = Precision::from_env().and_then(|p| run(&cli, p, &mut std::io::stdout().lock()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
