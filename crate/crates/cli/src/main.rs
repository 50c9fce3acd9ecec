use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use hyperfscil_cli::{config::SEED_ENV, execute, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let mut stdout = std::io::stdout().lock();
    match execute(cli, env_seed.as_deref(), &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hyperfscil: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
