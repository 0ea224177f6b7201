use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid span [{start}, {end}]: need 0 <= start <= end <= 1")]
    InvalidSpan { start: f64, end: f64 },

    #[error("invalid triplet (p={anchor}, d_s={to_start}, d_e={to_end})")]
    InvalidTriplet { anchor: f64, to_start: f64, to_end: f64 },

    #[error("invalid center/length ({center}, {length})")]
    InvalidCenterLength { center: f64, length: f64 },

    #[error("{what}: expected {expected}, got {got}")]
    DimMismatch { what: String, expected: usize, got: usize },

    #[error("invalid sample {id}: {reason}")]
    InvalidSample { id: String, reason: String },

    #[error("{n_gt} ground truths cannot be matched to {n_pred} predictions")]
    TooManyGroundTruths { n_gt: usize, n_pred: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("missing feature file for sample {id}: {path}")]
    MissingFeatures { id: String, path: PathBuf },

    #[error("bad feature file {path}: {reason}")]
    FeatureFormat { path: PathBuf, reason: String },

    #[error("non-finite loss term `{0}`")]
    NonFinite(&'static str),

    #[error("{0}")]
    Empty(&'static str),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
