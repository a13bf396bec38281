use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {what} {index} (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate link: endpoints coincide")]
    DegenerateLink,

    #[error("singular geometry: link distance {distance} m makes the log path-loss term zero")]
    SingularGeometry { distance: f64 },

    #[error("calibration incomplete: {} (antenna, channel, tag) cells have no reads, first: {:?}", missing.len(), missing.first())]
    CalibrationIncomplete { missing: Vec<(usize, usize, usize)> },

    #[error("dimension mismatch: {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("solver error: {0}")]
    Solver(String),

    #[error("training diverged: non-finite loss at step {step}")]
    TrainingDiverged { step: usize },

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("no evaluation windows")]
    NoWindows,

    #[error("label center ({u}, {v}) lies outside the {width}x{height} grid")]
    CenterOutsideGrid {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },

    #[error("missing calibration statistics for tag {tag} antenna {antenna}")]
    MissingDiffStats { tag: usize, antenna: usize },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown scenario: {0}")]
    UnknownScenario(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
