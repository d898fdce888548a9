use std::fmt;
use std::process::ExitCode;

use gatecal::Error;

/// A command failure, sorted by the exit code it maps to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    pub const USAGE: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERICAL: u8 = 4;

    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => Self::USAGE,
            Failure::Data(_) => Self::DATA,
            Failure::Numerical(_) => Self::NUMERICAL,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    /// Prefixes the message with where it happened.
    pub fn context(self, what: impl fmt::Display) -> Self {
        match self {
            Failure::Usage(m) => Failure::Usage(format!("{what}: {m}")),
            Failure::Data(m) => Failure::Data(format!("{what}: {m}")),
            Failure::Numerical(m) => Failure::Numerical(format!("{what}: {m}")),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Shape { .. } | Error::InvalidArgument(_) => Failure::Usage(msg),
            Error::Data { .. } | Error::Checkpoint { .. } | Error::Io(_) => Failure::Data(msg),
            Error::Numerical(_) | Error::Aborted { .. } => Failure::Numerical(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}
