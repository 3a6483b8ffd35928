use std::path::PathBuf;

/// Errors raised while reading or writing grids, reports and configs.
#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: header mismatch: {reason}", path.display())]
    HeaderMismatch { path: PathBuf, reason: String },

    #[error("{}: payload is {actual} bytes, header requires {expected}", path.display())]
    TruncatedPayload { path: PathBuf, expected: u64, actual: u64 },

    #[error("{source_name}:{line}: {field}: {message}")]
    SchemaViolation {
        source_name: String,
        line: usize,
        /// JSON path of the offending field, e.g. `findings[1].diameters_mm[0]`.
        field: String,
        message: String,
    },

    #[error(transparent)]
    Core(#[from] reportsup_core::Error),
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> IoError {
    let path = path.into();
    move |source| IoError::Io { path, source }
}
