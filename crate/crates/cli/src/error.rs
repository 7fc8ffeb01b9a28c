use std::path::PathBuf;

use klr_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    ConfigParse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for contract and config errors, 3 for numerical failures, 4 for I/O
    /// and unreadable files.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::ConfigParse { .. } => 2,
            CliError::Io { .. } | CliError::Csv { .. } => 4,
            CliError::Core(e) => match e {
                CoreError::Contract(_) | CoreError::Vocabulary(_) => 2,
                CoreError::Degenerate(_) | CoreError::Factorization { .. } | CoreError::Diverged { .. } => 3,
                CoreError::Io { .. } | CoreError::Checksum { .. } | CoreError::Version { .. } | CoreError::Format(_) => 4,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
