use std::process::ExitCode;

use thiserror::Error;

/// CLI failure classes, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Format(String),
    #[error("{failed} of {total} pairs failed")]
    Pairs { failed: usize, total: usize },
    #[error("{failed} of {total} self-test checks failed")]
    Selftest { failed: usize, total: usize },
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Io(_) => "io",
            Self::Format(_) => "format",
            Self::Pairs { .. } => "pair",
            Self::Selftest { .. } => "selftest",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Io(_) => 3,
            Self::Format(_) => 4,
            Self::Pairs { .. } => 5,
            Self::Selftest { .. } => 6,
        }
    }

    /// One line: `error kind=<kind> message=<JSON string>`.
    pub fn line(&self) -> String {
        let msg = serde_json::to_string(&self.to_string()).expect("string serialises");
        format!("error kind={} message={msg}", self.kind())
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    /// Classifies a library error raised while loading inputs.
    pub fn from_input(context: &str, e: geomatch::Error) -> Self {
        use geomatch::Error as E;
        match e {
            E::Io(e) => Self::Io(format!("{context}: {e}")),
            E::Format(_) | E::Json(_) | E::Shape(_) => Self::Format(format!("{context}: {e}")),
            other => Self::Config(format!("{context}: {other}")),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
