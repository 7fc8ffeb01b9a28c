use std::path::PathBuf;

/// Errors raised by the editing, encoding, training, and storage layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an operation's contract (shapes, counts, modes).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An input that the formulas divide by (or normalize) was zero.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Cholesky factorization hit a non-positive pivot.
    #[error("factorization failed: pivot {index} is {value:e} (matrix not positive-definite)")]
    Factorization { index: usize, value: f64 },

    #[error("unknown token {0:?}")]
    Vocabulary(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    /// Bytes that do not parse as the expected container.
    #[error("malformed file: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Contract(msg()))
    }
}
