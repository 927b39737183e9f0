use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty group")]
    EmptyGroup,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{what} length {len} is not divisible by group size {group_size}")]
    NotDivisible {
        what: &'static str,
        len: usize,
        group_size: usize,
    },

    #[error("degenerate tensor: per-tensor scale search exceeded n = {0}")]
    DegenerateTensor(u32),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("overlapping tensor regions: {0}")]
    OverlappingRegions(String),

    #[error("truncated payload: need {needed} bytes, have {available}")]
    TruncatedPayload { needed: usize, available: usize },

    #[error("unknown dtype: {0}")]
    UnknownDtype(String),

    #[error("package version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("missing tensor: {0}")]
    MissingTensor(String),

    #[error("missing recipe: {0}")]
    MissingRecipe(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invariant failed: {0}")]
    InvariantFailure(String),
}

pub type Result<T> = std::result::Result<T, Error>;
