use std::fmt;

use faultclip_core::Error;

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, flags or input paths. Exit code 2.
    Config(String),
    /// Unreadable or inconsistent model/dataset contents. Exit code 3.
    Data(String),
    /// An internal invariant did not hold. Exit code 4.
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    /// Classifies a core error, prefixing `context` to the message.
    pub fn from_core(context: &str, e: Error) -> Self {
        let msg = format!("{context}: {e}");
        match e {
            Error::Config(_) | Error::MaskIndex(_) => CliError::Config(msg),
            Error::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Config(msg),
            Error::SplitOverlap(_) | Error::EmptyLogits => CliError::Internal(msg),
            _ => CliError::Data(msg),
        }
    }

    pub fn io(context: impl fmt::Display, e: std::io::Error) -> Self {
        CliError::Data(format!("{context}: {e}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Attaches context to core results.
pub trait Context<T> {
    fn context(self, what: &str) -> Result<T, CliError>;
}

impl<T> Context<T> for Result<T, Error> {
    fn context(self, what: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::from_core(what, e))
    }
}
