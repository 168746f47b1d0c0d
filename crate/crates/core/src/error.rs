use thiserror::Error;

/// Errors raised by samplers, accountants and training loops.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("inadmissible alignment: rho = {rho} must exceed threshold {threshold} (r = {r}, delta' = {delta_prime})")]
    InadmissibleAlignment {
        rho: f64,
        threshold: f64,
        r: usize,
        delta_prime: f64,
    },

    #[error("regime error: {0}")]
    Regime(String),

    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Convergence failures are reported separately from input errors by the CLI.
    pub fn is_convergence(&self) -> bool {
        matches!(self, Error::Convergence(_))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
