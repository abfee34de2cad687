use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CgctError> = std::result::Result<T, E>;

/// Pipeline stage an error originated from. Surfaces in CLI messages and
/// in the `stage` field of service error bodies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Network,
    Autoencoder,
    Counterfactual,
    Gps,
    Baseline,
    SemiSynthetic,
    Evaluation,
    Allocation,
    Persistence,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Network => "network",
            Stage::Autoencoder => "autoencoder",
            Stage::Counterfactual => "counterfactual",
            Stage::Gps => "gps",
            Stage::Baseline => "baseline",
            Stage::SemiSynthetic => "semi_synthetic",
            Stage::Evaluation => "evaluation",
            Stage::Allocation => "allocation",
            Stage::Persistence => "persistence",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum CgctError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("no rows for year {0}")]
    EmptyYear(i32),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("scaler used before fit")]
    NotFitted,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("infeasible problem: {0}")]
    Infeasible(String),
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("{context}: {source}")]
    Twin {
        context: String,
        #[source]
        source: Box<CgctError>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("unknown country `{0}`")]
    UnknownCountry(String),
    #[error("model document version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("model document is corrupt: {0}")]
    Corrupt(String),
    #[error("[{stage}] {source}")]
    Staged {
        stage: Stage,
        #[source]
        source: Box<CgctError>,
    },
}

impl CgctError {
    /// Wraps the error with a stage label unless it already carries one.
    pub fn at(self, stage: Stage) -> Self {
        match self {
            e @ CgctError::Staged { .. } => e,
            e => CgctError::Staged {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            CgctError::Staged { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &CgctError {
        match self {
            CgctError::Staged { source, .. } => source.root(),
            e => e,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
