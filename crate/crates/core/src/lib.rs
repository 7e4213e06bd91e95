//! Robust output-feedback tube MPC for linear systems under ellipsoidal
//! disturbance bounds.
//!
//! The pieces fit together as follows: [`ellipsoid`] provides the set
//! arithmetic substrate (support functions over Minkowski summand lists);
//! [`linsys`] holds the problem data and synthesis helpers (Riccati, ZOH
//! discretization, the quadrotor model); [`estimator`] implements
//! set-membership state estimation with a precomputable shape recursion;
//! [`tube`] turns the estimator guarantees into constraint-tightening
//! schedules and a time-invariant tightening; [`baselines`] provides the two
//! polytopic reference tighteners for comparison; [`controller`] builds the
//! terminal ingredients and solves the tightened optimal control problem
//! through the dense QP solver in [`qp`].

pub mod baselines;
pub mod controller;
pub mod ellipsoid;
pub mod error;
pub mod estimator;
pub mod linsys;
pub mod lp;
pub mod qp;
pub mod tube;

pub use ellipsoid::{contained_in, Ellipsoid, SummandList};
pub use error::{Error, Result};
pub use estimator::{EstimatorParams, EstimatorState};
pub use linsys::{Constraints, CostWeights, LinearSystem, QuadrotorParams};
pub use tube::{TighteningSchedule, TubeDynamics, TubeState};
