use thiserror::Error;

/// Errors surfaced by tensor ops, transforms, block construction and IO.
///
/// Shape and configuration mismatches are hard errors everywhere: equivalence
/// checking must never silently coerce operands.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("weight manifest: {0}")]
    Manifest(String),

    #[error("spec file: {0}")]
    SpecFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn manifest(msg: impl Into<String>) -> Self {
        Error::Manifest(msg.into())
    }
}
