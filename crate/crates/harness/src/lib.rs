//! Benchmark harness for the ellipsoidal tube MPC: scenario files, the
//! closed-loop simulator, batch runs, and report/CSV/SVG outputs.

pub mod error;
pub mod plot;
pub mod report;
pub mod scenario;
pub mod sim;

pub use error::{HarnessError, Result};
pub use scenario::{Method, Scenario, ScenarioFile};
pub use sim::{run_closed_loop, run_monte_carlo, MonteCarloReport, SimLog, Synthesis};
