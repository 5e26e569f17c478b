use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("fully masked row")]
    FullyMaskedRow,

    #[error("composite rows fully masked: at least one of alpha, beta, gamma must be finite")]
    CompositeFullyMasked,

    #[error("invalid mask entry: {0}")]
    InvalidEntry(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid region: {0}")]
    Region(String),

    #[error("solver divergence at step {step}")]
    SolverDivergence { step: usize },

    #[error("image error: {0}")]
    Image(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::SolverDivergence { .. } | Error::FullyMaskedRow)
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
