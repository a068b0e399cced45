//! Error type shared by every module of the core crate.

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CoreError {
    /// A vector with near-zero norm cannot be normalized.
    #[error("degenerate vector: norm below 1e-12")]
    DegenerateVector,
    /// Mismatched array or tensor shapes.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// Scene geometry does not fit the requested image frame.
    #[error("geometry error: {0}")]
    GeometryError(String),
    /// A configuration value is out of its valid range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    /// Fewer than three light directions.
    #[error("insufficient lights: photometric stereo needs q >= 3, got {0}")]
    InsufficientLights(usize),
    /// Light direction matrix is rank-deficient.
    #[error("degenerate lighting: light directions do not span 3D space")]
    DegenerateLighting,
    /// A non-finite value appeared where finite arithmetic was required.
    #[error("numerical error: {0}")]
    NumericalError(String),
}

pub type Result<T> = core::result::Result<T, CoreError>;
