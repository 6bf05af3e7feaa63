use std::process::ExitCode;

use clap::Parser;
use scenecap::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = cli.check_usage() {
        e.exit();
    }
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
