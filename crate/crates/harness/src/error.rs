use std::fmt;

#[derive(Debug)]
pub enum HarnessError {
    Core(tube_mpc_core::Error),
    Scenario(String),
    Io(std::io::Error),
    /// The optimal control problem turned infeasible mid-run.
    MidRunInfeasible {
        step: usize,
        detail: String,
    },
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Core(e) => write!(f, "{e}"),
            HarnessError::Scenario(m) => write!(f, "scenario: {m}"),
            HarnessError::Io(e) => write!(f, "io: {e}"),
            HarnessError::MidRunInfeasible { step, detail } => {
                write!(f, "OCP infeasible at step {step}: {detail}")
            }
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<tube_mpc_core::Error> for HarnessError {
    fn from(e: tube_mpc_core::Error) -> Self {
        HarnessError::Core(e)
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
