use thiserror::Error;

#[derive(Debug, Error)]
pub enum CtError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("palette violation: {0}")]
    Palette(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("unsupported variant: {0}")]
    Variant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CtError>;

pub(crate) fn shape_err(op: &'static str, left: impl std::fmt::Debug, right: impl std::fmt::Debug) -> CtError {
    CtError::Shape {
        op,
        left: format!("{left:?}"),
        right: format!("{right:?}"),
    }
}
