use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("unresolvable target `{0}`: none of its tokens have a word vector")]
    UnresolvableTarget(String),

    #[error("degenerate cosine: {0}")]
    DegenerateCosine(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this error category: 2 config, 3 data, 4 divergence, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Dimension(_) => 2,
            Error::Data(_)
            | Error::Format { .. }
            | Error::UnresolvableTarget(_)
            | Error::DegenerateCosine(_)
            | Error::Json(_)
            | Error::Checkpoint(_) => 3,
            Error::Divergence(_) => 4,
            Error::Io(_) => 5,
        }
    }
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
