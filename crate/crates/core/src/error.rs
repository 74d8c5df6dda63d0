use thiserror::Error;

/// Errors raised across the numeric, routing, autograd and training layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("NaN gradient at tape node {node} ({op})")]
    NanGradient { node: usize, op: &'static str },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported operation: {0}")]
    UnsupportedOp(String),

    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("bad magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated payload in {what}: expected {expected} bytes, found {found}")]
    Truncated { what: String, expected: usize, found: usize },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("loss became NaN at epoch {epoch}, step {step}")]
    NanLoss { epoch: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::ShapeMismatch {
        op,
        detail: detail.into(),
    })
}
