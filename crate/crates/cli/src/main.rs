use std::process::ExitCode;

use clap::Parser;

mod commands;
mod header;

use commands::Cli;

/// Exit status for invalid command lines (clap's own convention).
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_CONFIG: u8 = 4;
const EXIT_RUNTIME: u8 = 5;

fn exit_code(err: &anyhow::Error) -> u8 {
    use hrfseg::Error;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NotFound(_) | Error::Io(_) | Error::Image(_) => EXIT_IO,
                Error::Config(_) | Error::Toml(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
        if cause.downcast_ref::<commands::UsageError>().is_some() {
            return EXIT_USAGE;
        }
    }
    EXIT_RUNTIME
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(cli.log_level()))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
