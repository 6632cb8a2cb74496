//! Error types shared across the crate, one enum per subsystem.

use thiserror::Error;

/// Errors from MDP construction, oracles, and chain diagnostics.
#[derive(Debug, Error)]
pub enum MdpError {
    #[error("transition row P[{s}][{a}] is not a distribution: {detail}")]
    NonStochasticRow { s: usize, a: usize, detail: String },
    #[error("reward r[{s}][{a}] = {value} outside [-1, 1]")]
    RewardOutOfRange { s: usize, a: usize, value: f64 },
    #[error("discount gamma = {0} outside the open interval (0, 1)")]
    BadDiscount(f64),
    #[error("policy row pi(.|{s}) is not a distribution: {detail}")]
    BadPolicyRow { s: usize, detail: String },
    #[error("distribution over states invalid: {0}")]
    BadDistribution(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("state id {0} out of range")]
    InvalidState(usize),
    #[error("iteration cap {cap} reached (residual {residual:.3e})")]
    NonConvergence { cap: usize, residual: f64 },
    #[error("induced chain is reducible")]
    Reducible,
    #[error("induced chain is periodic with period {0}")]
    Periodic(usize),
    #[error("mixing fit degenerate: {0}")]
    FitDegenerate(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Errors from network construction and the parameter snapshot format.
#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid network shape: {0}")]
    BadShape(String),
    #[error("flat parameter count {params} exceeds configured cap {cap}")]
    WidthCapExceeded { params: usize, cap: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot parse error: {0}")]
    Parse(String),
}

/// Errors from the training loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("run config invalid: {0}")]
    BadConfig(String),
    #[error("run discount {config} does not match MDP discount {mdp}")]
    DiscountMismatch { config: f64, mdp: f64 },
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Errors from the diagnostics probes.
#[derive(Debug, Error)]
pub enum DiagError {
    #[error("sigma_star requested but no direction was supplied")]
    DirectionMissing,
    #[error("linearized model is anchored at a different snapshot than the run being probed")]
    AnchorMismatch,
    #[error("Sigma_pi is numerically singular (min eigenvalue {min_eig:.3e} < 1e-12); check inconclusive")]
    SigmaSingular { min_eig: f64 },
    #[error("gradient dimension {dim} too large for a dense {dim}x{dim} second-moment matrix (cap {cap})")]
    DimensionTooLarge { dim: usize, cap: usize },
    #[error("greedy-selection space |A|^|S| = {size} exceeds enumeration cap {cap}")]
    SelectionSpaceTooLarge { size: u128, cap: u128 },
    #[error("damped fixed-point iteration did not converge within {cap} sweeps (last step {step:.3e})")]
    NonConvergence { cap: usize, step: f64 },
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
}
