use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range 1..={n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("degree {degree} exceeds the supported maximum {max}")]
    DegreeOverflow { degree: usize, max: usize },

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("Gram matrix is not positive definite: pivot {pivot:.3e} at column {column}")]
    GramFactorization { column: usize, pivot: f64 },

    #[error("quadrature underflow: {0}")]
    QuadratureUnderflow(String),

    #[error("filter diverged at step {step} (t = {t})")]
    Divergence { step: usize, t: f64 },

    #[error("degenerate filter state: normalizer {normalizer:.3e}")]
    DegenerateState { normalizer: f64 },

    #[error("basis transition retained only {retained:.1}% of the L2 mass")]
    RebaseMassLoss { retained: f64 },

    #[error("rebase limit of {max} exceeded at step {step}")]
    RebaseLimit { max: usize, step: usize },

    #[error("particle weights collapsed at step {step}")]
    WeightCollapse { step: usize },

    #[error("basis size {m} exceeds the dense limit {max}")]
    TooLarge { m: usize, max: usize },

    #[error("{0}")]
    Parse(String),
}

impl Error {
    /// True for failures of the numerical scheme itself, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. }
                | Error::DegenerateState { .. }
                | Error::RebaseMassLoss { .. }
                | Error::WeightCollapse { .. }
                | Error::GramFactorization { .. }
        )
    }

    /// Attach a step index to errors raised inside a stepping loop.
    pub(crate) fn at_step(self, step: usize, t: f64) -> Error {
        match self {
            Error::Divergence { .. } => Error::Divergence { step, t },
            other => other,
        }
    }
}
