//! Error type shared by all modules of the crate.

use std::fmt;

/// Errors produced by set arithmetic, estimation, synthesis, and solvers.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An argument was non-finite, out of range, or otherwise malformed.
    InvalidArgument(String),
    /// Matrix or vector dimensions do not agree.
    DimensionMismatch(String),
    /// A factorization or inversion failed, or conditioning is hopeless.
    Numerical(String),
    /// An iteration hit its cap without meeting its tolerance.
    NoConvergence(String),
    /// Measured data is incompatible with the assumed disturbance bounds.
    InadmissibleData(String),
    /// Gain or terminal-set synthesis failed (e.g. non-stabilizable pair).
    Synthesis(String),
    /// The constraint tightening leaves no room for the nominal system.
    InfeasibleTightening { rows: Vec<usize>, detail: String },
    /// An operation was called outside its contract.
    ContractViolation(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::DimensionMismatch(m) => write!(f, "dimension mismatch: {m}"),
            Error::Numerical(m) => write!(f, "numerical failure: {m}"),
            Error::NoConvergence(m) => write!(f, "no convergence: {m}"),
            Error::InadmissibleData(m) => write!(f, "inadmissible data: {m}"),
            Error::Synthesis(m) => write!(f, "synthesis failed: {m}"),
            Error::InfeasibleTightening { rows, detail } => {
                write!(f, "infeasible tightening on rows {rows:?}: {detail}")
            }
            Error::ContractViolation(m) => write!(f, "contract violation: {m}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
