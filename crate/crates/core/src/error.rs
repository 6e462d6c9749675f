use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("index width overflow: {0}")]
    IndexWidthOverflow(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("bad magic bytes")]
    BadMagic,

    #[error("unsupported format version {0}")]
    VersionUnsupported(u16),

    #[error("truncated stream")]
    TruncatedStream,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
