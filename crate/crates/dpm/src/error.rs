use thiserror::Error;

#[derive(Debug, Error)]
pub enum DpmError {
    /// Shape mismatch in a tensor primitive; names the operation and shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration or argument value.
    #[error("invalid {field}: {detail}")]
    Invalid { field: String, detail: String },

    /// NaN or Inf surfaced by a numeric operation.
    #[error("non-finite values in {context}")]
    NonFinite { context: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Corrupt or mismatched on-disk artifact.
    #[error("format error: {0}")]
    Format(String),
}

impl DpmError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DpmError::Shape { op, detail: detail.into() }
    }

    pub fn invalid(field: impl Into<String>, detail: impl Into<String>) -> Self {
        DpmError::Invalid { field: field.into(), detail: detail.into() }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        DpmError::NonFinite { context: context.into() }
    }

    /// Process exit code contract: 1 validation, 2 numeric, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            DpmError::Shape { .. } | DpmError::Invalid { .. } => 1,
            DpmError::NonFinite { .. } => 2,
            DpmError::Io(_) | DpmError::Format(_) => 3,
        }
    }
}
