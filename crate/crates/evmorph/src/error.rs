use std::path::PathBuf;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("coordinate out of bounds: {0}")]
    Bounds(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("topology mismatch: {0}")]
    Topology(String),
    #[error("singular configuration: {0}")]
    Singular(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing input: {0}")]
    MissingInput(PathBuf),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
