use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use otta_cli::{exit_code, run, Cli, EXIT_PARTIAL};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(done) => {
            // A closed stdout (e.g. piped into `head`) is not a failure.
            let _ = writeln!(std::io::stdout(), "{}", done.summary);
            if done.partial {
                eprintln!("error: some sweep cells failed; see the report");
                ExitCode::from(EXIT_PARTIAL)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
