use serde::Serialize;
use whiteguard_core::{Error, StorageError};

/// Success.
pub const EXIT_OK: i32 = 0;
/// I/O failure, unreadable or corrupt file, internal error.
pub const EXIT_FAILURE: i32 = 1;
/// Bad configuration, unusable data or a category that cannot be calibrated.
pub const EXIT_DATA: i32 = 2;
/// Scoring finished but some records produced error rows.
pub const EXIT_RECORD_ERRORS: i32 = 3;

/// A command failure, printed to stderr as one JSON line.
#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    #[serde(skip)]
    pub exit_code: i32,
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl CliError {
    pub fn new(exit_code: i32, error: &'static str, message: impl Into<String>) -> Self {
        Self {
            exit_code,
            error,
            message: message.into(),
            category: None,
            path: None,
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_DATA, "configuration", message)
    }

    pub fn io(path: &std::path::Path, source: impl std::fmt::Display) -> Self {
        Self {
            path: Some(path.display().to_string()),
            ..Self::new(EXIT_FAILURE, "io", source.to_string())
        }
    }

    pub fn with_path(mut self, path: &std::path::Path) -> Self {
        self.path.get_or_insert_with(|| path.display().to_string());
        self
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.error, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        let (code, kind, category) = match &e {
            Error::Storage(StorageError::Io { path, .. }) => {
                let mut err = CliError::new(EXIT_FAILURE, "io", message);
                err.path = Some(path.display().to_string());
                return err;
            }
            Error::Storage(_) => (EXIT_FAILURE, "format", None),
            Error::Calibration { category, .. } | Error::CalibrationFailure { category, .. } => {
                (EXIT_DATA, "calibration", Some(category.clone()))
            }
            Error::UnknownCategory(c) => (EXIT_DATA, "unknown_category", Some(c.clone())),
            Error::Configuration(_) => (EXIT_DATA, "configuration", None),
            Error::Numeric(_) => (EXIT_FAILURE, "numeric", None),
            _ => (EXIT_DATA, "data", None),
        };
        CliError {
            category,
            ..CliError::new(code, kind, message)
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
