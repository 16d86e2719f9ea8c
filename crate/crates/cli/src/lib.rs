//! Command-line front end: argument parsing, checkpoints and commands.

pub mod args;
pub mod checkpoint;
pub mod commands;
pub mod error;

use clap::Parser;

use args::{Cli, Command};
use error::{CliError, EXIT_OK, EXIT_USAGE};

fn configure_threads(flag: Option<usize>) -> Result<(), CliError> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var("ELF_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Usage(format!("ELF_THREADS must be a thread count, got `{v}`")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        // a second call in the same process fails harmlessly
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Train(a) => commands::cmd_train(a),
        Command::Eval(a) => commands::cmd_eval(a).map(drop),
        Command::Sample(a) => commands::cmd_sample(a),
        Command::DensityGrid(a) => commands::cmd_density_grid(a),
        Command::Check(a) => commands::cmd_check(a).map(drop),
        Command::Bench(a) => commands::cmd_bench(a),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(d) = e.details() {
                eprintln!("{d}");
            }
            e.exit_code()
        }
    }
}
