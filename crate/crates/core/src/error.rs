use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid dimensions for {what}: {detail}")]
    InvalidDimensions { what: &'static str, detail: String },

    #[error("non-finite entry in {what}")]
    NonFinite { what: &'static str },

    #[error("eigendecomposition did not converge")]
    DecompositionFailed,

    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("step size {step} outside the stability interval (0, {bound})")]
    StepOutOfBounds { step: f64, bound: f64 },

    #[error("check {check} failed: measured {measured:e}, tolerance {tolerance:e}")]
    CheckFailed {
        check: &'static str,
        measured: f64,
        tolerance: f64,
    },

    #[error("gradient descent did not converge within {iters} iterations")]
    NotConverged { iters: usize },

    #[error("teacher step {step} beyond horizon {horizon}")]
    HorizonExceeded { step: usize, horizon: usize },

    #[error("kernel mass is zero or non-finite at step {step}")]
    DegenerateKernelMass { step: usize },

    #[error("trajectory offsets are not monotone at index {index}")]
    NonMonotoneTrajectory { index: usize },

    #[error("evaluation set is empty")]
    EmptyEvalSet,
}
