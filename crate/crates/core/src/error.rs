use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("incomparable poses: {0}")]
    IncomparablePoses(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unknown featurizer `{0}`")]
    UnknownFeaturizer(String),

    #[error("no scorable views")]
    NoScorableViews,

    #[error("silhouette undefined: {0}")]
    SilhouetteUndefined(String),

    #[error("too few unstable views to split: {0} (need at least 4)")]
    TooFewUnstable(usize),

    #[error("clusters collapsed")]
    ClustersCollapsed,

    #[error("degenerate training set: {0}")]
    DegenerateTrainingSet(String),

    #[error("solver did not converge after {iterations} iterations (KKT gap {gap:.3e})")]
    NotConverged { iterations: usize, gap: f64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True when the error was caused by bad user input rather than an
    /// internal failure. The CLI maps this to exit code 2.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_validation(),
            Error::Io { .. }
            | Error::NotConverged { .. }
            | Error::ClustersCollapsed
            | Error::TooFewUnstable(_)
            | Error::SilhouetteUndefined(_)
            | Error::DegenerateTrainingSet(_)
            | Error::NoScorableViews => false,
            Error::IncomparablePoses(_)
            | Error::DegenerateEmbedding(_)
            | Error::InvalidArgument(_)
            | Error::DimensionMismatch { .. }
            | Error::UnknownFeaturizer(_)
            | Error::Validation(_)
            | Error::Format { .. }
            | Error::Json(_)
            | Error::Csv(_) => true,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
