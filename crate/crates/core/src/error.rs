use std::path::PathBuf;

/// Errors produced by the look-alike library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate vector (zero norm)")]
    DegenerateVector,
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("no seeds available for candidate {0}")]
    NoSeeds(String),
    #[error("user not found: {0}")]
    UserNotFound(String),
    #[error("degenerate embedding for user {0}")]
    DegenerateUser(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("missing prerequisite file {0}")]
    MissingDependency(PathBuf),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension { op, left, right }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
