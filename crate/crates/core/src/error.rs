use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("term outside truncation bounds: {0}")]
    OutOfBounds(String),

    #[error("lie series order {order} exceeds the hard cap {cap}")]
    OrderCap { order: usize, cap: usize },

    #[error("supremum diverges: {0}")]
    Divergent(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("generators do not span a direct summand (invariant factor {factor})")]
    NotSummand { factor: i64 },

    #[error("small divisor at k = {k:?}: {detail}")]
    SmallDivisor { k: Vec<i32>, detail: String },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("action is not on the resonant surface: {0}")]
    NotResonant(String),

    #[error("kam step rejected: {0}")]
    StepRejected(String),

    #[error("basis too small: {msg} (need N_t >= {required})")]
    BasisTooSmall { required: usize, msg: String },

    #[error("matrix dimension {dim} exceeds cap {cap}")]
    DimensionCap { dim: usize, cap: usize },

    #[error("energy windows overlap between m = {a:?} and m = {b:?}")]
    WindowsOverlap { a: Vec<i64>, b: Vec<i64> },

    #[error("oracle coverage: {0}")]
    Coverage(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) | Error::Parse { .. } => 2,
            Error::SmallDivisor { .. } => 3,
            Error::Coverage(_) | Error::BasisTooSmall { .. } | Error::DimensionCap { .. } => 4,
            Error::Invariant(_) | Error::WindowsOverlap { .. } => 5,
            _ => 1,
        }
    }
}
