use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape constraint violated (zero extent, element-count mismatch, ...).
    #[error("invalid shape: {0}")]
    Shape(String),

    /// A contract precondition failed (non-scalar loss, bad probability, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or infinity showed up where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Configuration file or value problem.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset generation could not satisfy placement constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// On-disk format problem (manifest, checkpoint, image files).
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
