use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input violates a documented invariant or schema.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A model could not be fitted (degenerate data).
    #[error("fit error: {0}")]
    Fit(String),

    #[error("insufficient correspondences: {0} survived matching, at least 4 required")]
    InsufficientCorrespondences(usize),

    #[error("estimation failure: {0}")]
    Estimation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed input rather than a failing computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Parse { .. } | Error::Parameter(_)
        )
    }
}
