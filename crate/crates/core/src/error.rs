use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// The model is in a state where the requested operation is meaningless,
    /// e.g. every expert has been shut down.
    #[error("invalid state: {0}")]
    State(String),

    /// Newton iteration did not converge; carries the last iterate of the
    /// latent value along the feature direction.
    #[error("newton iteration failed to converge after {iterations} iterations (last latent {last_latent})")]
    Convergence { iterations: usize, last_latent: f64 },

    #[error("initialization failed: {0}")]
    Init(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("objective not finite within parameter bounds: {0}")]
    ParameterBounds(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at row {row}{}: {message}", column.map(|c| format!(", column {c}")).unwrap_or_default())]
    Parse {
        row: u64,
        column: Option<usize>,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
