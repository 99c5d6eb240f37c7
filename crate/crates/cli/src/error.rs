use nucdiff_core::ErrorKind;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

/// Failures carry their process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    NotConverged(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::NotConverged(_) => 3,
            CliError::Input(_) => 4,
            CliError::Numerical(_) => 5,
        }
    }

    /// Prefixes the message, keeping the exit code.
    pub fn context(self, what: impl std::fmt::Display) -> Self {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{what}: {m}")),
            CliError::NotConverged(m) => CliError::NotConverged(format!("{what}: {m}")),
            CliError::Input(m) => CliError::Input(format!("{what}: {m}")),
            CliError::Numerical(m) => CliError::Numerical(format!("{what}: {m}")),
        }
    }
}

impl From<nucdiff_core::Error> for CliError {
    fn from(e: nucdiff_core::Error) -> Self {
        let msg = e.to_string();
        match e.kind() {
            ErrorKind::Argument => CliError::Usage(msg),
            ErrorKind::Numerical => CliError::Numerical(msg),
            ErrorKind::Shape | ErrorKind::Format | ErrorKind::Io => CliError::Input(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Input(e.to_string())
    }
}
