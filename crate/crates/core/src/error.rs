use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("operator `{0}` is degenerate: every coefficient matrix vanishes")]
    DegenerateOperator(String),

    #[error("operator `{name}` fails the constant rank property (ranks {min}..={max} observed)")]
    NotConstantRank {
        name: String,
        min: usize,
        max: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("field is not in the range of the potential operator (max per-frequency residual {residual:.3e})")]
    NotInRange { residual: f64 },

    #[error("projector and pseudoinverse representatives disagree by {gap:.3e}")]
    FormulaMismatch { gap: f64 },

    #[error("integrand `{0}` has no strong recession function")]
    MissingRecession(String),

    #[error("integrand `{0}` is not differentiable; enable smoothing")]
    NonDifferentiable(String),

    #[error("optimizer diverged: {0}")]
    OptimizerDiverged(String),

    #[error("measure support is closer than {margin:.3e} to the box boundary")]
    SupportTooClose { margin: f64 },

    #[error("direction {0:?} is not in the wave cone")]
    OutsideWaveCone(Vec<f64>),

    #[error("qc family is empty")]
    EmptyFamily,

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
