use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("design error: {0}")]
    Design(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Enumerating a model universe would produce more test directions than
    /// the hard budget allows.
    #[error("direction budget exceeded: {0}")]
    Budget(String),

    /// Coordinate descent stalled; the index points into the lambda grid.
    #[error("coordinate descent did not converge at lambda index {lambda_index}")]
    LassoNoConvergence { lambda_index: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable process exit code for the CLI: 2 usage/config, 3 io, 4 compute.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Parse(_) | Error::Config(_) => 2,
            Error::Io(_) => 3,
            Error::Design(_)
            | Error::Numerical(_)
            | Error::Budget(_)
            | Error::LassoNoConvergence { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
