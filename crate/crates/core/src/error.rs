use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("containment: {0}")]
    Containment(String),

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("block partition: {0}")]
    Partition(String),

    #[error("incomplete assignment: edge {0} has no value")]
    IncompleteAssignment(String),

    #[error("edge {0} is not declared in the coupling configuration")]
    UndeclaredEdge(String),

    #[error("spin configuration does not cover site {0}")]
    Coverage(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("size limit exceeded: {0}")]
    Size(String),

    #[error("state pair mismatch: {0}")]
    Pair(String),

    #[error("bound violated: {0}")]
    BoundViolation(String),

    #[error("config: {0}")]
    Config(String),

    #[error("incomplete run: {0}")]
    IncompleteRun(String),

    #[error("realization {realization} (master seed {master}) failed: {source}")]
    Realization {
        master: u64,
        realization: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
