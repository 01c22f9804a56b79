use thiserror::Error;

/// Errors raised by the numerical modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("regime error: {0}")]
    Regime(String),
    #[error("numerical integrity error: {0}")]
    Integrity(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("outside lifespan: {0}")]
    OutOfLifespan(String),
    #[error("horizon error: {0}")]
    Horizon(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// True for failures caused by the numerics rather than by user input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Integrity(_)
                | Error::Numerical(_)
                | Error::Invariant(_)
                | Error::Resolution(_)
                | Error::Horizon(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
