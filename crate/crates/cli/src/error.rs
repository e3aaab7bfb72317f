use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Exit status for operator mistakes: bad config, missing files, bad data.
pub const EXIT_USER: u8 = 1;
/// Exit status for failures inside a run.
pub const EXIT_INTERNAL: u8 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] patchfed_core::Error),

    #[error("cannot parse {path} at `{field}`: {message}")]
    Parse {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error("{failed} of {total} grid rows failed")]
    GridRows {
        failed: usize,
        total: usize,
        /// Whether any failure was internal rather than caused by input.
        internal: bool,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_user_error() => EXIT_USER,
            CliError::Core(_) => EXIT_INTERNAL,
            CliError::Parse { .. } => EXIT_USER,
            CliError::GridRows { internal, .. } => {
                if *internal {
                    EXIT_INTERNAL
                } else {
                    EXIT_USER
                }
            }
        }
    }
}
