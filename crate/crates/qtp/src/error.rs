use thiserror::Error;

#[derive(Error, Debug)]
pub enum QtpError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("graph error at node {node} ({op}): {detail}")]
    Graph {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("missing binding for '{0}'")]
    MissingBinding(String),
    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("image error: {0}")]
    Image(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input directory: {0}")]
    EmptyDirectory(String),
}
