//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("unsupported feature file: {0}")]
    UnsupportedFeatureFile(String),

    #[error("manifest integrity: {0}")]
    ManifestIntegrity(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("divergence detected: {0}")]
    Divergence(String),

    #[error("stratification requires labels (record {0})")]
    UnlabeledRecord(u64),

    #[error("insufficient domain samples for covariance (domain {0})")]
    InsufficientDomainSamples(u32),

    #[error("degenerate embedding")]
    DegenerateEmbedding,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

impl Error {
    /// Process exit code for the CLI: 2 configuration, 3 I/O,
    /// 4 numeric divergence, 5 integrity.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnlabeledRecord(_) | Error::ShapeMismatch(_) => 2,
            Error::Io(_) => 3,
            Error::Divergence(_)
            | Error::InsufficientDomainSamples(_)
            | Error::DegenerateEmbedding => 4,
            Error::UnsupportedFeatureFile(_)
            | Error::ManifestIntegrity(_)
            | Error::IncompatibleCheckpoint(_) => 5,
        }
    }
}
