use thiserror::Error;

/// Errors raised by the numerical and experiment layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("tape output is not a scalar ({rows}x{cols})")]
    NotScalar { rows: usize, cols: usize },
    #[error("function returned a non-finite value at coordinate {0}")]
    NonFiniteFunction(usize),
    #[error("singular network block: {0}")]
    SingularNetwork(&'static str),
    #[error("reflection coefficient magnitude {0} >= 1 (total reflection)")]
    ReflectionOverflow(f64),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("rank-deficient matrix: {0}")]
    RankDeficient(&'static str),
    #[error("optimization diverged: {0}")]
    DivergedOptimization(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("training diverged: {0}")]
    DivergedTraining(String),
    #[error("invalid power model: {0}")]
    InvalidPowerModel(String),
    #[error("invalid configuration:\n{0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
