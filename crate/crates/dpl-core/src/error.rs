//! Crate-wide error type.

/// Errors raised by the numeric core, the attention engine, and the harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    /// Prompt set is empty, so the f/h softmax-mass split is undefined.
    #[error("degenerate decomposition: {0}")]
    DegenerateDecomposition(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("state error: {0}")]
    State(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
