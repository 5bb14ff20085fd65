use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate {coord:?} out of range for grid {dims:?}")]
    OutOfRange { coord: [i64; 3], dims: [usize; 3] },

    #[error("linear index {index} out of range for grid of {len} voxels")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0:?} vs {1:?}")]
    GridMismatch([usize; 3], [usize; 3]),

    #[error("distance field requested for an empty target set")]
    EmptyTarget,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    InFile { path: std::path::PathBuf, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attaches the file the error arose from.
    pub fn in_file(self, path: impl Into<std::path::PathBuf>) -> Self {
        match self {
            e @ Error::InFile { .. } => e,
            e => Error::InFile { path: path.into(), source: Box::new(e) },
        }
    }
}
