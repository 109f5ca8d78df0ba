use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward requires a scalar output node, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("node id {node} does not belong to this tape (len {len})")]
    UnknownNode { node: usize, len: usize },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}
