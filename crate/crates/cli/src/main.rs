use std::process::ExitCode;

use clap::Parser;
use plnpca_cli::args::Cli;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    match plnpca_cli::commands::run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("plnpca {name}: {e:#}");
            ExitCode::FAILURE
        }
    }
}
