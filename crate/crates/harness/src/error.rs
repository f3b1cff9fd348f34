use std::fmt;

use mtrlab_core::Error as CoreError;

/// Failures with distinct process exit codes.
#[derive(Debug)]
pub enum HarnessError {
    /// Invalid or unreadable configuration (exit 2).
    Config(String),
    /// NaN/Inf encountered (exit 3).
    Numeric(String),
    /// A theory-check agreement threshold was violated (exit 4).
    Threshold(String),
    Other(anyhow::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Numeric(_) => 3,
            HarnessError::Threshold(_) => 4,
            HarnessError::Other(_) => 1,
        }
    }
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config(m) => write!(f, "config error: {m}"),
            HarnessError::Numeric(m) => write!(f, "numeric failure: {m}"),
            HarnessError::Threshold(m) => write!(f, "threshold violated: {m}"),
            HarnessError::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<CoreError> for HarnessError {
    fn from(e: CoreError) -> Self {
        if e.is_numeric() {
            HarnessError::Numeric(e.to_string())
        } else {
            HarnessError::Other(e.into())
        }
    }
}

impl From<anyhow::Error> for HarnessError {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<CoreError>() {
            Ok(core) => core.into(),
            Err(e) => HarnessError::Other(e),
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Other(e.into())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Other(e.into())
    }
}

pub type HarnessResult<T> = Result<T, HarnessError>;
