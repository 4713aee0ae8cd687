use std::process::ExitCode;

use clap::Parser;
use fmem_cli::cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.overrides.resolve().and_then(|cfg| execute(cli.command, &cfg)) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.summary());
            ExitCode::FAILURE
        }
    }
}
