use std::io;
use std::path::PathBuf;

use elf_core::ElfError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_CONVERGENCE: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("training aborted at step {step}: {reason}; last good weights written to {}", checkpoint.display())]
    Aborted {
        step: usize,
        reason: String,
        checkpoint: PathBuf,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Some oracle checks failed; the reports were already printed.
    #[error("{0} of {1} checks failed")]
    ChecksFailed(usize, usize),

    #[error(transparent)]
    Core(#[from] ElfError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(ElfError::Config(_)) => EXIT_USAGE,
            CliError::Aborted { .. } | CliError::Core(ElfError::NonFiniteLoss { .. } | ElfError::Numeric(_)) => {
                EXIT_NUMERIC
            }
            CliError::Core(ElfError::Convergence { .. }) => EXIT_CONVERGENCE,
            _ => EXIT_FAILURE,
        }
    }

    /// Extra lines printed after the message.
    pub fn details(&self) -> Option<String> {
        match self {
            CliError::Core(ElfError::Convergence { failing, .. }) => {
                let shown: Vec<String> = failing.iter().take(100).map(usize::to_string).collect();
                let more = if failing.len() > 100 {
                    format!(" (+{} more)", failing.len() - 100)
                } else {
                    String::new()
                };
                Some(format!(
                    "failing sample indices: {}{more}\nraise --fp-max-iters or --fp-tol to accept these samples",
                    shown.join(",")
                ))
            }
            _ => None,
        }
    }
}
