use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// Variants split into input problems (bad files, missing data, inconsistent
/// dimensions) and numerical problems (divergence, degenerate normalizers).
/// The CLI maps the two groups onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("segment has no pixels")]
    EmptySegment,

    #[error("malformed run-length encoding: {0}")]
    BadRle(String),

    #[error("largest-segment area {largest} is smaller than segment area {area}")]
    DegenerateNormalizer { largest: u64, area: u64 },

    #[error("image {0} has no segments")]
    NoSegments(String),

    #[error("missing feature row {row} for image {image_id}")]
    MissingFeatures { image_id: String, row: usize },

    #[error("objective diverged ({reached:.6e} > 10x initial {initial:.6e}); try a smaller learning rate")]
    Diverged { initial: f64, reached: f64 },

    #[error("class {0} has no positive training examples")]
    NoPositives(usize),

    #[error("need at least {need} regression pairs, got {have}")]
    InsufficientPairs { have: usize, need: usize },

    #[error("feature provider has no features for image {image_id} box ({x1}, {y1}, {x2}, {y2})")]
    Provider {
        image_id: String,
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
    },

    #[error("average precision undefined: class has no ground truth")]
    ApUndefined,

    #[error("invalid box ({x1}, {y1}, {x2}, {y2})")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{path}: byte {offset}: {msg}")]
    Binary { path: PathBuf, offset: u64, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// True for failures caused by the numbers rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Diverged { .. } | Error::DegenerateNormalizer { .. })
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
