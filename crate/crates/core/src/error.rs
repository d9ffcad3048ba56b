use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CvpError {
    #[error("non-finite Lagrangian value at x = {x:?}, y = {y:?}")]
    NumericalFailure { x: Vec<f64>, y: Vec<f64> },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("measure is not critical: support values deviate by {deviation:e}")]
    NotCritical { deviation: f64 },
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("derivative order {requested} exceeds the supported maximum {max}")]
    OrderUnsupported { requested: usize, max: usize },
    #[error("right-hand side not in the range of the operator (relative residual {residual:e})")]
    OutOfRange { residual: f64 },
    #[error("invalid argument: {0}")]
    ArgError(String),
    #[error("jet does not solve the linearized field equations (residual {residual:e})")]
    NotLinearized { residual: f64 },
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("series was built without a diagram ledger")]
    LedgerMissing,
    #[error("fragmentation is not well posed: {0}")]
    NotWellPosed(String),
    #[error("inconclusive log-log fit (residual {residual:.3})")]
    InconclusiveFit { residual: f64 },
    #[error("local trace vanishes (|tr| = {trace:e})")]
    VanishingLocalTrace { trace: f64 },
    #[error("singular chart: {0}")]
    SingularChart(String),
    #[error("invalid point: {0}")]
    InvalidPoint(String),
    #[error("matrix is not unitary (defect {defect:e})")]
    NotUnitary { defect: f64 },
    #[error("unitary is not on the minimal stratum (max modulus defect {defect:e})")]
    NotOnMinimalStratum { defect: f64 },
    #[error("index out of range: {0}")]
    IndexError(String),
    #[error("unknown model: {0}")]
    UnknownModel(String),
}

pub type Result<T> = std::result::Result<T, CvpError>;
