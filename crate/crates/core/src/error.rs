use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("inverted element {triangle}: signed area {area:e}")]
    InvertedElement { triangle: usize, area: f64 },

    #[error("field has {got} values, mesh has {expected} vertices")]
    SizeMismatch { expected: usize, got: usize },

    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },

    #[error("trajectory from ({x:.6}, {y:.6}) left the hold-all box")]
    LeftHoldAll { x: f64, y: f64 },

    #[error("flow outside validity range: {0}")]
    FlowValidity(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("density is not monotone: d/du w = {slope:e} at u = {u}")]
    NonMonotoneDensity { u: f64, slope: f64 },

    #[error("degradation below threshold: c = {value:e} < eta = {eta:e}")]
    Degradation { value: f64, eta: f64 },

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("line search failed at iteration {iteration}")]
    LineSearch { iteration: usize },

    #[error("no KKT-consistent active set among {candidates} candidates")]
    NoKktCandidate { candidates: usize },

    #[error("inconsistent solution: {0}")]
    InconsistentSolution(String),

    #[error("boundary form requires a static obstacle")]
    DynamicObstacle,

    #[error("damage step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::Step { step, source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
