use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the geometry, training and data layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("point lies on or outside the Poincaré ball (c·‖x‖² = {scaled_norm_sq})")]
    OutsideBall { scaled_norm_sq: f64 },

    #[error("zero-norm vector where a direction is required")]
    ZeroNorm,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("distance gradient is singular at coincident points")]
    Singular,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label {0} is not part of the class bank")]
    UnknownLabel(u32),

    #[error("class {0} appears in more than one role or session")]
    ClassCollision(u32),

    #[error("class {0} already has a stored snapshot")]
    DuplicateSnapshot(u32),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by numerics rather than by inputs or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::OutsideBall { .. } | Error::NonFinite(_) | Error::Singular | Error::ZeroNorm
        )
    }

    pub fn is_data(&self) -> bool {
        matches!(self, Error::Format(_) | Error::Data(_) | Error::Io(_))
    }
}

/// Typed failures when decoding an embedding bundle.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("{file}: bad magic bytes {found:?}")]
    BadMagic { file: String, found: [u8; 4] },

    #[error("{file}: unsupported version {found}")]
    UnsupportedVersion { file: String, found: u32 },

    #[error("{file}: truncated (needed {needed} bytes, have {have})")]
    Truncated {
        file: String,
        needed: usize,
        have: usize,
    },

    #[error("{file}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum {
        file: String,
        stored: u32,
        computed: u32,
    },

    #[error("{file}: trailing bytes after payload")]
    TrailingBytes { file: String },

    #[error("{file}: invalid {what}")]
    InvalidField { file: String, what: String },

    #[error("manifest: {0}")]
    Manifest(String),
}
