use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BmlError {
    #[error("step {step} has no exact degree")]
    MissingDegree { step: usize },
    #[error("candidate list is empty")]
    EmptyCandidates,
    #[error("unsupported bundle: {0}")]
    UnsupportedBundle(String),
    #[error("no admissible rationals with denominator <= {bound}")]
    BoundTooSmall { bound: u64 },
    #[error("invalid resolution: {0}")]
    InvalidResolution(String),
    #[error("non-finite integrand at node {index}")]
    NonFiniteIntegrand { index: usize },
    #[error("level {level} is below the regularity {regularity}")]
    LevelBelowRegularity { level: i64, regularity: i64 },
    #[error("evaluation map has rank {rank} < {expected} at z = {point}")]
    RankDeficient { rank: usize, expected: usize, point: String },
    #[error("degenerate metric at node {index} (min eigenvalue {min_eig:e})")]
    DegenerateMetric { index: usize, min_eig: f64 },
    #[error("sample ranks vary too much: {0}")]
    DegenerateSamples(String),
    #[error("finite-difference step too large: {0}")]
    StepTooLarge(String),
    #[error("need at least {needed} tail samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("singular Gram matrix")]
    SingularGram,
    #[error("iteration diverged (spread {spread:.3})")]
    Diverged { spread: f64 },
    #[error("inconclusive: {0}")]
    Inconclusive(String),
    #[error("no catalog Hermitian-Einstein metric for {0}")]
    MissingHE(String),
    #[error("invalid filtration: {0}")]
    InvalidFiltration(String),
    #[error("invalid generator: {0}")]
    InvalidGenerator(String),
    #[error("config error in `{field}`: {msg}")]
    ConfigError { field: String, msg: String },
    #[error("experiment failed: {0}")]
    ExperimentFailed(String),
    #[error("io error: {0}")]
    IOError(String),
}

pub type Result<T> = std::result::Result<T, BmlError>;

impl BmlError {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        BmlError::ConfigError { field: field.into(), msg: msg.into() }
    }
}

impl From<std::io::Error> for BmlError {
    fn from(e: std::io::Error) -> Self {
        BmlError::IOError(e.to_string())
    }
}
