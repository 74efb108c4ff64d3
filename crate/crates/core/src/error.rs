use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(std::io::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("snapshot invariant violated: {0}")]
    Invariant(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("singular regressor matrix, collinear columns: {}", .0.join(", "))]
    Singular(Vec<String>),

    #[error("residual covariance is not positive definite")]
    NotPositiveDefinite,

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("no positive labels to rank")]
    NoPositives,

    #[error("graph has no nodes")]
    EmptyGraph,
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        match err.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Format(format!("{other:?}")),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        if err.is_io() {
            Error::Io(err.into())
        } else {
            Error::Format(err.to_string())
        }
    }
}
