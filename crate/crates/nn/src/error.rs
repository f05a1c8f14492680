use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch at `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing tensor `{0}` in checkpoint")]
    MissingTensor(String),
    #[error("operation not supported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn shape_err(node: &str, detail: impl Into<String>) -> NnError {
    NnError::ShapeMismatch {
        node: node.to_string(),
        detail: detail.into(),
    }
}
