use thiserror::Error;

/// Errors raised by measure construction, kernel algebra and flow integration.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("incompatible grids")]
    IncompatibleGrids,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot normalize null measure")]
    NullMeasure,
    #[error("kernel not differentiable here")]
    NotDifferentiable,
    #[error("singular operator")]
    SingularOperator,
    #[error("eigendecomposition did not converge")]
    EigenFailure,
    #[error("energy overflow")]
    EnergyOverflow,
    #[error("empty neighborhood")]
    EmptyNeighborhood,
    #[error("H^-1 requires equal mass")]
    UnequalMass,
    #[error("FR path requires common support")]
    DisjointPath,
    #[error("geodesic crosses a pole: 1 + s*xi/2 <= 0")]
    PoleCrossing,
    #[error("incompatible energy/geometry: {0}")]
    Incompatible(String),
    #[error("blow-up; reduce dt (t = {t})")]
    BlowUp { t: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
