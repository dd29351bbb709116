use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("missing profile: {0}")]
    MissingProfile(String),
    #[error("degenerate alignment: {0}")]
    Degenerate(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("undefined phase: {0}")]
    UndefinedPhase(String),
    #[error("convergence failure at t = {last_t}: {msg}")]
    Convergence { last_t: f64, msg: String },
    #[error("integration failure: {0}")]
    Integration(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 2 for validation problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Convergence { .. } | Error::Integration(_) | Error::UndefinedPhase(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
