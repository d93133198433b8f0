use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Why a single layer could not be fitted during calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDiagnostic {
    pub layer: usize,
    pub reason: String,
}

impl std::fmt::Display for LayerDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "layer {}: {}", self.layer, self.reason)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty calibration data: {0}")]
    EmptyData(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("non-finite value in input at index {index}")]
    NonFiniteInput { index: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("calibration error in category {category:?}: {message}")]
    Calibration { category: String, message: String },

    #[error("calibration failed for category {category:?}: no usable layer ({})", format_diagnostics(.diagnostics))]
    CalibrationFailure {
        category: String,
        diagnostics: Vec<LayerDiagnostic>,
    },

    #[error("routing error: {0}")]
    Routing(String),

    #[error("unknown category {0:?}")]
    UnknownCategory(String),

    #[error("activation for layer {0} is missing")]
    MissingLayer(usize),

    #[error(transparent)]
    Storage(#[from] StorageError),
}

fn format_diagnostics(diagnostics: &[LayerDiagnostic]) -> String {
    diagnostics
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Failures reading or writing activation files and guard bundles.
#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("unexpected trailing bytes: {0}")]
    TrailingBytes(String),

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("non-finite float in record {record} (layer {layer}, index {index})")]
    NonFinite {
        record: usize,
        layer: usize,
        index: usize,
    },

    #[error("offset out of bounds for profile {profile:?}: {detail}")]
    Offset { profile: String, detail: String },

    #[error("malformed content: {0}")]
    Malformed(String),

    #[error("manifest error: {0}")]
    Manifest(String),
}

impl StorageError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StorageError::Io {
            path: path.into(),
            source,
        }
    }
}
