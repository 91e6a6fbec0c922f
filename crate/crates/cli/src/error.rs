use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{source}; replay bundle written to {}", replay.display())]
    Diverged {
        source: distok::Error,
        replay: PathBuf,
    },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Core(#[from] distok::Error),
}

impl CliError {
    /// 2 for configuration and usage problems, 3 for divergence, 4 for a
    /// failed gradient check, 1 for numerical failures outside training.
    pub fn exit_code(&self) -> u8 {
        use distok::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Diverged { .. } => 3,
            CliError::GradCheck(_) => 4,
            CliError::Core(e) => match e {
                E::Diverged { .. } => 3,
                E::Shape { .. } | E::Degenerate(_) | E::NonFinite(_) | E::StaleCache(_) => 1,
                _ => 2,
            },
        }
    }
}
