use std::io;

use thiserror::Error;

/// Errors raised by the simulator.
///
/// `Config` and `InvalidMdp` are user-facing input problems; `Consistency`
/// means an algorithmic invariant broke at runtime and the run must stop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("internal consistency failure: {0}")]
    Consistency(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for bad input, 3 for broken invariants.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Consistency(_) => 3,
            Error::Io(_) | Error::Csv(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! consistency {
    ($($arg:tt)*) => {
        $crate::error::Error::Consistency(format!($($arg)*))
    };
}
pub(crate) use consistency;
