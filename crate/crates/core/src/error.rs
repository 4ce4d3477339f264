use std::path::PathBuf;

/// Errors produced by the thickness engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: {what}: expected {expected:?}, got {got:?}")]
    DimMismatch {
        what: &'static str,
        expected: [usize; 3],
        got: [usize; 3],
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("bad file header: {field}: {detail}")]
    BadHeader { field: &'static str, detail: String },

    #[error("stale tape: {0}")]
    StaleTape(&'static str),

    #[error("shape mismatch: {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("optimization diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("degenerate ratings: {0}")]
    Degenerate(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(what: &'static str, expected: [usize; 3], got: [usize; 3]) -> Self {
        Error::DimMismatch {
            what,
            expected,
            got,
        }
    }
}
