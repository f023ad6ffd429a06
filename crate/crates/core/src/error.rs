use thiserror::Error;

/// Errors raised across the library. Variants map one-to-one onto the
/// error kinds named by each operation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape: {0}")]
    Shape(String),
    #[error("too-large: {count} exceeds cap {cap}")]
    TooLarge { count: u128, cap: u128 },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("unreachable-history: conditioning event has zero probability at step {step}")]
    UnreachableHistory { step: usize },
    #[error("core-tests-insufficient: step {step} residual {residual:.3e}")]
    CoreTestsInsufficient { step: usize, residual: f64 },
    #[error("infeasible")]
    Infeasible,
    #[error("unbounded")]
    Unbounded,
    #[error("undefined-scaling: {0}")]
    UndefinedScaling(String),
    #[error("class-incompatible: every model assigns zero likelihood to some trajectory")]
    ClassIncompatible,
    #[error("insufficient-points: {0} usable points, need 3")]
    InsufficientPoints(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Short machine-readable kind, e.g. `"shape"` or `"too-large"`.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::TooLarge { .. } => "too-large",
            Error::InvalidDistribution(_) => "invalid-distribution",
            Error::UnreachableHistory { .. } => "unreachable-history",
            Error::CoreTestsInsufficient { .. } => "core-tests-insufficient",
            Error::Infeasible => "infeasible",
            Error::Unbounded => "unbounded",
            Error::UndefinedScaling(_) => "undefined-scaling",
            Error::ClassIncompatible => "class-incompatible",
            Error::InsufficientPoints(_) => "insufficient-points",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
