//! Declarative scenario files and their resolution into solver-ready data.
//!
//! A scenario TOML mirrors the problem data: system (explicit matrices or the
//! quadrotor model), ellipsoidal disturbance bounds, initial state and
//! estimate, mixed constraints, gains, estimator parameters (fixed or tuned),
//! tube settings, cost weights, and run settings. Unknown keys are rejected.

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use tube_mpc_core::ellipsoid::Ellipsoid;
use tube_mpc_core::estimator::{tune_params, EstimatorParams};
use tube_mpc_core::linsys::{
    dare_solve, discretize, linearize_quadrotor, Constraints, CostWeights, LinearSystem,
    QuadrotorParams,
};

use crate::error::{HarnessError, Result};

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(HarnessError::Scenario(format!("{what}: empty matrix")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(HarnessError::Scenario(format!("{what}: ragged matrix")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: Option<String>,
    pub system: SystemSection,
    pub disturbances: DisturbanceSection,
    pub initial: InitialSection,
    pub constraints: ConstraintSection,
    pub gains: GainSection,
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub tube: TubeSection,
    pub cost: CostSection,
    pub run: RunSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, tag = "type", rename_all = "kebab-case")]
pub enum SystemSection {
    Matrices {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        d: Option<Vec<Vec<f64>>>,
    },
    Quadrotor {
        mass: f64,
        gravity: f64,
        inertia: [f64; 3],
        dt: f64,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSection {
    /// Shape matrix of the state-disturbance ellipsoid.
    pub state_shape: Option<Vec<Vec<f64>>>,
    pub state_radius: Option<f64>,
    /// Shorthand: a ball of this radius (sets shape to r^2 I).
    pub state_ball: Option<f64>,
    pub output_shape: Option<Vec<Vec<f64>>>,
    pub output_radius: Option<f64>,
    pub output_ball: Option<f64>,
    /// uniform | boundary | zero
    #[serde(default = "default_mode")]
    pub mode: String,
}

fn default_mode() -> String {
    "uniform".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub x0: Vec<f64>,
    pub xhat0: Vec<f64>,
    /// Initial shape: an explicit matrix or "steady-state" for P_inf.
    pub psi: PsiSpec,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum PsiSpec {
    Tag(String),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    pub state: Vec<Vec<f64>>,
    pub input: Vec<Vec<f64>>,
    pub bound: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSection {
    /// Feedback gain: an explicit matrix or "lqr" to derive it from the cost.
    pub k: KSpec,
    /// Observer gain for the polytopic baselines.
    pub l: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum KSpec {
    Tag(String),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    pub beta: Option<f64>,
    pub rho: Option<f64>,
    #[serde(default)]
    pub tune: bool,
    pub grid_step: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeSection {
    #[serde(default = "default_alpha_cap")]
    pub alpha_cap: f64,
    #[serde(default = "default_steady_tol")]
    pub steady_tolerance: f64,
}

impl Default for TubeSection {
    fn default() -> Self {
        TubeSection {
            alpha_cap: default_alpha_cap(),
            steady_tolerance: default_steady_tol(),
        }
    }
}

fn default_alpha_cap() -> f64 {
    0.05
}

fn default_steady_tol() -> f64 {
    1e-6
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub state: Vec<Vec<f64>>,
    pub input: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub horizon: usize,
    pub steps: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    /// proposed | two-set | single-set
    #[serde(default = "default_method")]
    pub method: String,
}

fn default_runs() -> usize {
    100
}

fn default_method() -> String {
    "proposed".into()
}

/// How disturbances are drawn in simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisturbanceMode {
    Uniform,
    Boundary,
    Zero,
}

/// Which tightening feeds the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Proposed,
    TwoSet,
    SingleSet,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "proposed" => Ok(Method::Proposed),
            "two-set" => Ok(Method::TwoSet),
            "single-set" => Ok(Method::SingleSet),
            other => Err(HarnessError::Scenario(format!(
                "unknown method '{other}' (expected proposed | two-set | single-set)"
            ))),
        }
    }
}

/// Initial-shape choice, resolved against the steady state later.
#[derive(Debug, Clone)]
pub enum PsiChoice {
    SteadyState,
    Matrix(DMatrix<f64>),
}

/// Fully resolved problem instance.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub system: LinearSystem,
    /// State-disturbance ellipsoid, radius normalized to one.
    pub w: Ellipsoid,
    /// Output-disturbance ellipsoid, radius normalized to one.
    pub v: Ellipsoid,
    pub x0: DVector<f64>,
    pub xhat0: DVector<f64>,
    pub psi: PsiChoice,
    pub constraints: Constraints,
    pub k_gain: DMatrix<f64>,
    pub l_gain: Option<DMatrix<f64>>,
    pub est_params: EstimatorParams,
    pub weights: CostWeights,
    pub alpha_cap: f64,
    pub steady_tolerance: f64,
    pub horizon: usize,
    pub steps: usize,
    pub runs: usize,
    pub seed: u64,
    pub mode: DisturbanceMode,
    pub method: Method,
}

fn resolve_ellipsoid(
    shape: &Option<Vec<Vec<f64>>>,
    radius: &Option<f64>,
    ball: &Option<f64>,
    dim: usize,
    what: &str,
) -> Result<Ellipsoid> {
    match (shape, ball) {
        (Some(rows), None) => {
            let m = matrix(rows, what)?;
            let r = radius.unwrap_or(1.0);
            // fold the radius into the shape so downstream code can assume
            // radius one for the static disturbance sets
            let eff = &m * (r * r);
            Ellipsoid::centered(eff, 1.0).map_err(HarnessError::Core)
        }
        (None, Some(r)) => {
            let eff = DMatrix::identity(dim, dim) * (r * r);
            Ellipsoid::centered(eff, 1.0).map_err(HarnessError::Core)
        }
        (Some(_), Some(_)) => Err(HarnessError::Scenario(format!(
            "{what}: give either a shape or a ball radius, not both"
        ))),
        (None, None) => Err(HarnessError::Scenario(format!(
            "{what}: missing shape (or ball radius)"
        ))),
    }
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<ScenarioFile> {
        toml::from_str(text).map_err(|e| HarnessError::Scenario(format!("TOML: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<ScenarioFile> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Resolve the declarative file into solver-ready data. Tuning (when
    /// requested) runs here, so resolution can take a moment.
    pub fn resolve(&self) -> Result<Scenario> {
        let system = match &self.system {
            SystemSection::Matrices { a, b, c, d } => {
                let a = matrix(a, "system.a")?;
                let b = matrix(b, "system.b")?;
                let c = matrix(c, "system.c")?;
                let d = match d {
                    Some(rows) => Some(matrix(rows, "system.d")?),
                    None => None,
                };
                LinearSystem::new(a, b, c, d)?
            }
            SystemSection::Quadrotor {
                mass,
                gravity,
                inertia,
                dt,
            } => {
                let params = QuadrotorParams {
                    mass: *mass,
                    gravity: *gravity,
                    inertia: *inertia,
                    dt: *dt,
                };
                let (a_c, b_c) = linearize_quadrotor(&params)?;
                let (a, b) = discretize(&a_c, &b_c, params.dt)?;
                let c = DMatrix::identity(12, 12);
                LinearSystem::new(a, b, c, None)?
            }
        };
        let n = system.state_dim();
        let p = system.output_dim();
        let w = resolve_ellipsoid(
            &self.disturbances.state_shape,
            &self.disturbances.state_radius,
            &self.disturbances.state_ball,
            system.disturbance_dim(),
            "disturbances.state",
        )?;
        let v = resolve_ellipsoid(
            &self.disturbances.output_shape,
            &self.disturbances.output_radius,
            &self.disturbances.output_ball,
            p,
            "disturbances.output",
        )?;
        let mode = match self.disturbances.mode.as_str() {
            "uniform" => DisturbanceMode::Uniform,
            "boundary" => DisturbanceMode::Boundary,
            "zero" => DisturbanceMode::Zero,
            other => {
                return Err(HarnessError::Scenario(format!(
                    "unknown disturbance mode '{other}'"
                )))
            }
        };
        let constraints = Constraints::new(
            matrix(&self.constraints.state, "constraints.state")?,
            matrix(&self.constraints.input, "constraints.input")?,
            DVector::from_vec(self.constraints.bound.clone()),
        )?;
        if constraints.f.ncols() != n || constraints.g.ncols() != system.input_dim() {
            return Err(HarnessError::Scenario(
                "constraint matrices do not match the system dimensions".into(),
            ));
        }
        let state_w = matrix(&self.cost.state, "cost.state")?;
        let input_w = matrix(&self.cost.input, "cost.input")?;
        let (terminal_w, lqr_gain) = dare_solve(&system.a, &system.b, &state_w, &input_w)?;
        let k_gain = match &self.gains.k {
            KSpec::Tag(t) if t == "lqr" => lqr_gain,
            KSpec::Tag(t) => {
                return Err(HarnessError::Scenario(format!(
                    "unknown gain spec '{t}' (expected \"lqr\" or a matrix)"
                )))
            }
            KSpec::Matrix(rows) => matrix(rows, "gains.k")?,
        };
        let l_gain = match &self.gains.l {
            Some(rows) => Some(matrix(rows, "gains.l")?),
            None => None,
        };
        let weights = CostWeights::new(state_w, input_w, terminal_w)?;
        // effective disturbance shapes feed the estimator directly
        let q_shape = w.shape().clone();
        let r_shape = v.shape().clone();
        let est_params = if self.estimator.tune {
            let step = self.estimator.grid_step.unwrap_or(0.02);
            let (beta, rho) = tune_params(&system, &q_shape, &r_shape, step)?;
            EstimatorParams::new(beta, rho, q_shape, r_shape)?
        } else {
            let beta = self.estimator.beta.ok_or_else(|| {
                HarnessError::Scenario("estimator.beta missing (or set tune = true)".into())
            })?;
            let rho = self.estimator.rho.ok_or_else(|| {
                HarnessError::Scenario("estimator.rho missing (or set tune = true)".into())
            })?;
            EstimatorParams::new(beta, rho, q_shape, r_shape)?
        };
        let psi = match &self.initial.psi {
            PsiSpec::Tag(t) if t == "steady-state" => PsiChoice::SteadyState,
            PsiSpec::Tag(t) => {
                return Err(HarnessError::Scenario(format!(
                    "unknown psi spec '{t}' (expected \"steady-state\" or a matrix)"
                )))
            }
            PsiSpec::Matrix(rows) => PsiChoice::Matrix(matrix(rows, "initial.psi")?),
        };
        if self.initial.x0.len() != n || self.initial.xhat0.len() != n {
            return Err(HarnessError::Scenario(
                "initial state dimensions do not match the system".into(),
            ));
        }
        if self.run.horizon < 1 || self.run.steps < 1 {
            return Err(HarnessError::Scenario(
                "run.horizon and run.steps must be positive".into(),
            ));
        }
        Ok(Scenario {
            name: self.name.clone().unwrap_or_else(|| "scenario".into()),
            system,
            w,
            v,
            x0: DVector::from_vec(self.initial.x0.clone()),
            xhat0: DVector::from_vec(self.initial.xhat0.clone()),
            psi,
            constraints,
            k_gain,
            l_gain,
            est_params,
            weights,
            alpha_cap: self.tube.alpha_cap,
            steady_tolerance: self.tube.steady_tolerance,
            horizon: self.run.horizon,
            steps: self.run.steps,
            runs: self.run.runs,
            seed: self.run.seed,
            mode,
            method: Method::parse(&self.run.method)?,
        })
    }
}

/// Human-readable labels for the constraint rows: `x[i]` for pure state box
/// rows, `u[j]` for pure input box rows, `row r` otherwise.
pub fn row_labels(constraints: &Constraints) -> Vec<String> {
    let mut labels = Vec::with_capacity(constraints.rows());
    for r in 0..constraints.rows() {
        let f_row = constraints.f.row(r);
        let g_row = constraints.g.row(r);
        let f_nz: Vec<usize> = (0..f_row.ncols()).filter(|&j| f_row[j] != 0.0).collect();
        let g_nz: Vec<usize> = (0..g_row.ncols()).filter(|&j| g_row[j] != 0.0).collect();
        let label = match (f_nz.len(), g_nz.len()) {
            (1, 0) => format!("x[{}]", f_nz[0] + 1),
            (0, 1) => format!("u[{}]", g_nz[0] + 1),
            _ => format!("row {r}"),
        };
        labels.push(label);
    }
    labels
}
