//! Neuron ground metric and entropic optimal transport.

mod cost;
mod sinkhorn;

pub use cost::{cost_matrix, ActivationMatrix};
pub use sinkhorn::{
    entropy, objective, rescale_rows, sinkhorn, uniform, SinkhornConfig, SinkhornMode,
    TransportPlan, LOG_DOMAIN_RATIO,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OtError {
    #[error("support index {0} appears more than once")]
    DuplicateSupportIndex(usize),
    #[error("support index {index} out of range for {len} neurons")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("sinkhorn did not converge: marginal residual {residual:e} after {iterations} iterations")]
    NotConverged { residual: f64, iterations: usize },
    #[error("linear-domain kernel underflowed to zero")]
    NumericalUnderflow,
    #[error("invalid marginal: {0}")]
    InvalidMarginal(String),
    #[error("regularization must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("activation matrix is empty")]
    EmptyActivations,
    #[error("non-finite values in solver input")]
    NonFinite,
}
