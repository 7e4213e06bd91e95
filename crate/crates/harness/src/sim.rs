//! Closed-loop simulation: synthesis shared across runs, the per-step loop,
//! and the run log with its built-in guarantee checks.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tube_mpc_core::baselines::{
    single_set_tightening, steady_state_margins, two_set_tightening, BaselineKind,
    BaselineProblem, BoxSet,
};
use tube_mpc_core::controller::{
    build_and_solve_ocp, terminal_ingredients, Controller, OcpStatus, TerminalIngredients,
};
use tube_mpc_core::ellipsoid::{contained_in, Ellipsoid};
use tube_mpc_core::estimator::{measurement_update, steady_state_shape, EstimatorState};
use tube_mpc_core::tube::{
    contraction_params, prediction_schedule, steady_schedule_limit, time_invariant_tightening,
    tube_advance, ContractionParams, TighteningSchedule, TubeDynamics, TubeState,
};

use crate::error::{HarnessError, Result};
use crate::scenario::{DisturbanceMode, Method, PsiChoice, Scenario};

/// Tightening-side synthesis: everything needed to compute schedules and the
/// steady-state comparison, independent of whether a controller can be built.
#[derive(Debug, Clone)]
pub struct Tightening {
    pub p_inf: DMatrix<f64>,
    pub e_tilde: Ellipsoid,
    pub psi: DMatrix<f64>,
    pub dynamics: TubeDynamics,
    pub contraction: ContractionParams,
    /// Finite-sum bound on the steady-state tightening (terminal bound).
    pub time_invariant: DVector<f64>,
    /// Limit of the steady-state schedule margins (freeze values).
    pub margin_limit: DVector<f64>,
}

impl Tightening {
    pub fn build(sc: &Scenario) -> Result<Tightening> {
        let p_inf = steady_state_shape(&sc.est_params, &sc.system)?;
        let e_tilde = Ellipsoid::centered(p_inf.clone(), 1.0)?;
        let psi = match &sc.psi {
            PsiChoice::SteadyState => p_inf.clone(),
            PsiChoice::Matrix(m) => m.clone(),
        };
        let dynamics = TubeDynamics::new(&sc.system, &sc.k_gain, &sc.constraints, sc.w.clone())?;
        let contraction = contraction_params(&dynamics, &e_tilde, sc.alpha_cap)?;
        let time_invariant = time_invariant_tightening(&contraction, &dynamics, &e_tilde)?;
        let margin_limit = steady_schedule_limit(&dynamics, &e_tilde, 1e-13)?;
        Ok(Tightening {
            p_inf,
            e_tilde,
            psi,
            dynamics,
            contraction,
            time_invariant,
            margin_limit,
        })
    }

    /// The polytopic baseline problem over the bounding boxes of the
    /// configured disturbance ellipsoids, initialized at the boxed
    /// estimation-error limit set.
    pub fn baseline_problem(sc: &Scenario) -> Result<BaselineProblem> {
        let l_gain = sc.l_gain.clone().ok_or_else(|| {
            HarnessError::Scenario("baseline methods need an observer gain (gains.l)".into())
        })?;
        let w_box = BoxSet::new(sc.w.min_bounding_box()?)?;
        let v_box = BoxSet::new(sc.v.min_bounding_box()?)?;
        let e0_box =
            tube_mpc_core::baselines::estimation_mrpi_box(&sc.system, &l_gain, &w_box, &v_box)?;
        Ok(BaselineProblem::new(
            &sc.system,
            l_gain,
            &sc.k_gain,
            w_box,
            v_box,
            e0_box,
            &sc.constraints,
        )?)
    }
}

/// Everything computed once per scenario and shared by all runs.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub tight: Tightening,
    pub terminal: TerminalIngredients,
    /// Margins of the configured baseline per absolute time, when the run
    /// drives the controller with a baseline schedule.
    pub baseline_margins: Option<DMatrix<f64>>,
    pub synthesis_time: std::time::Duration,
}

impl Synthesis {
    pub fn build(sc: &Scenario) -> Result<Synthesis> {
        let t0 = Instant::now();
        let tight = Tightening::build(sc)?;
        // terminal tightening and in-loop margins follow the configured method
        let (f_bar, baseline_margins) = match sc.method {
            Method::Proposed => (tight.time_invariant.clone(), None),
            Method::TwoSet | Method::SingleSet => {
                let problem = Tightening::baseline_problem(sc)?;
                let kind = if sc.method == Method::TwoSet {
                    BaselineKind::TwoSet
                } else {
                    BaselineKind::SingleSet
                };
                let f_bar = steady_state_margins(&problem, kind, 1e-9)?;
                let span = sc.steps + sc.horizon + 1;
                let table = match sc.method {
                    Method::TwoSet => two_set_tightening(&problem, span)?,
                    Method::SingleSet => single_set_tightening(&problem, span)?,
                    Method::Proposed => unreachable!(),
                };
                (f_bar, Some(table))
            }
        };
        let terminal =
            terminal_ingredients(&sc.system, &sc.weights, &sc.k_gain, &f_bar, &sc.constraints)?;
        Ok(Synthesis {
            tight,
            terminal,
            baseline_margins,
            synthesis_time: t0.elapsed(),
        })
    }
}

/// One step of the log: state, estimate, nominal state, input, output,
/// disturbances, the scalar estimator radius loss, the optimal cost, the
/// applied margins and the constraint slacks.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub k: usize,
    pub x: DVector<f64>,
    pub xhat: DVector<f64>,
    pub xbar: DVector<f64>,
    pub u: DVector<f64>,
    pub y: DVector<f64>,
    pub w: DVector<f64>,
    pub v: DVector<f64>,
    pub delta_sq: f64,
    pub vstar: f64,
    pub margins: DVector<f64>,
    pub slack: DVector<f64>,
}

/// Full run log plus the guarantee checks evaluated on the way out.
#[derive(Debug, Clone)]
pub struct SimLog {
    pub seed: u64,
    pub records: Vec<StepRecord>,
    /// Estimator shapes along the run (data-independent).
    pub p_seq: Vec<DMatrix<f64>>,
    pub min_slack: f64,
    /// Worst violation of `(x-xhat)' P^-1 (x-xhat) <= 1 - delta^2`.
    pub worst_containment_excess: f64,
    /// Worst violation of the realized tightening term over its margin.
    pub worst_margin_excess: f64,
    /// Worst violation of `V*_{k+1} - V*_k <= -q(xbar_k, ubar_k)`.
    pub worst_lyapunov_excess: f64,
    pub final_nominal_norm: f64,
    pub max_step_time: std::time::Duration,
    pub schedule_time: std::time::Duration,
}

impl SimLog {
    pub fn satisfies_guarantees(&self) -> bool {
        self.min_slack >= -1e-9
            && self.worst_containment_excess <= 1e-9
            && self.worst_margin_excess <= 1e-9
            && self.worst_lyapunov_excess <= 1e-6
    }
}

fn sample(e: &Ellipsoid, mode: DisturbanceMode, rng: &mut ChaCha8Rng) -> DVector<f64> {
    match mode {
        DisturbanceMode::Uniform => e.sample_uniform(rng),
        DisturbanceMode::Boundary => e.sample_boundary(rng),
        DisturbanceMode::Zero => DVector::zeros(e.dim()),
    }
}

/// Simulate the closed loop for `sc.steps` steps with the given seed.
///
/// Per step: tightening schedule (tube prediction or baseline table), the
/// condensed OCP, the feedback law, then the plant and the set-membership
/// estimator. Deterministic for a fixed seed. A mid-run infeasible OCP aborts
/// with a diagnostic error carrying the step index.
pub fn run_closed_loop(sc: &Scenario, synth: &Synthesis, seed: u64) -> Result<SimLog> {
    let d = sc.constraints.rows();
    let big_t = sc.steps;
    let horizon = sc.horizon;
    let tight = &synth.tight;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // admissibility of the initial pair
    let e0 = Ellipsoid::centered(tight.psi.clone(), 1.0)?;
    let init_err = &sc.x0 - &sc.xhat0;
    if e0.gauge_sq(&init_err)? > 1.0 + 1e-9 {
        return Err(HarnessError::Scenario(
            "x0 - xhat0 lies outside the initial uncertainty set".into(),
        ));
    }
    let mut est = EstimatorState::initial(sc.xhat0.clone(), tight.psi.clone())?;
    let mut ctrl = Controller::new(sc.xhat0.clone(), sc.k_gain.clone());
    let mut tube = TubeState::initial(e0)?;
    let mut x = sc.x0.clone();
    let mut frozen = false;
    let mut p_switched = false;
    let mut log = SimLog {
        seed,
        records: Vec::with_capacity(big_t + 1),
        p_seq: Vec::with_capacity(big_t + 1),
        min_slack: f64::INFINITY,
        worst_containment_excess: f64::NEG_INFINITY,
        worst_margin_excess: f64::NEG_INFINITY,
        worst_lyapunov_excess: f64::NEG_INFINITY,
        final_nominal_norm: 0.0,
        max_step_time: std::time::Duration::ZERO,
        schedule_time: std::time::Duration::ZERO,
    };
    let mut prev_cost: Option<(f64, f64)> = None; // (V*, stage cost)
    let mut y = &sc.system.c * &x; // y_0 (not used by the estimator)
    let mut w_applied = DVector::zeros(sc.w.dim());
    let mut v_applied = DVector::zeros(sc.v.dim());
    for k in 0..=big_t {
        let step_start = Instant::now();
        // the steady-state switch: certified containment plus shape distance
        if !p_switched {
            let dist = (&est.p - &tight.p_inf).norm() / tight.p_inf.norm();
            if dist < sc.steady_tolerance {
                let e_now = Ellipsoid::centered(
                    est.p.clone(),
                    (1.0 - est.delta_sq).max(0.0).sqrt(),
                )?;
                if contained_in(&e_now, &tight.e_tilde)? {
                    p_switched = true;
                }
            }
        }
        let sched_start = Instant::now();
        let schedule: TighteningSchedule = match sc.method {
            Method::Proposed => {
                if frozen {
                    TighteningSchedule::constant(&tight.margin_limit, horizon)
                } else if p_switched {
                    // estimation error over-approximated by its steady set
                    let proxy = EstimatorState {
                        xhat: est.xhat.clone(),
                        p: tight.p_inf.clone(),
                        delta_sq: 0.0,
                        k: est.k,
                    };
                    prediction_schedule(
                        &tube,
                        &proxy,
                        horizon,
                        &tight.dynamics,
                        &sc.est_params,
                        &sc.system,
                    )?
                } else {
                    prediction_schedule(
                        &tube,
                        &est,
                        horizon,
                        &tight.dynamics,
                        &sc.est_params,
                        &sc.system,
                    )?
                }
            }
            Method::TwoSet | Method::SingleSet => {
                let table = synth.baseline_margins.as_ref().unwrap();
                let last = table.ncols() - 1;
                let mut m = DMatrix::zeros(d, horizon + 1);
                for i in 0..=horizon {
                    let t = (k + i).min(last);
                    m.column_mut(i).copy_from(&table.column(t));
                }
                let terminal = m.column(horizon).into_owned();
                TighteningSchedule {
                    margins: m,
                    terminal,
                }
            }
        };
        log.schedule_time += sched_start.elapsed();
        let ocp = build_and_solve_ocp(
            &ctrl.xbar,
            &schedule,
            &sc.system,
            &sc.weights,
            &sc.constraints,
            &synth.terminal.set,
            horizon,
        )?;
        if ocp.status != OcpStatus::Optimal {
            return Err(HarnessError::MidRunInfeasible {
                step: k,
                detail: format!(
                    "method {:?}, nominal state {:?}",
                    sc.method,
                    ctrl.xbar.as_slice()
                ),
            });
        }
        // Lyapunov bookkeeping uses the pre-step nominal state
        let xbar_k = ctrl.xbar.clone();
        let ubar0 = ocp.ubar.column(0).into_owned();
        let stage_cost = 0.5
            * (xbar_k.dot(&(&sc.weights.state * &xbar_k))
                + ubar0.dot(&(&sc.weights.input * &ubar0)));
        if let Some((v_prev, q_prev)) = prev_cost {
            log.worst_lyapunov_excess = log
                .worst_lyapunov_excess
                .max(ocp.value - v_prev + q_prev);
        }
        prev_cost = Some((ocp.value, stage_cost));
        let u = ctrl.control_step(&sc.system, &est.xhat, &ocp)?;
        // realized tightening term against the applied margin
        let s_err = &x - &xbar_k;
        let e_err = &x - &est.xhat;
        let margins0 = schedule.step(0);
        for row in 0..d {
            let realized = tight.dynamics.closed_rows.row(row).transpose().dot(&s_err)
                - tight.dynamics.feedback_rows.row(row).transpose().dot(&e_err);
            log.worst_margin_excess = log.worst_margin_excess.max(realized - margins0[row]);
        }
        let slack = &sc.constraints.bound - &sc.constraints.f * &x - &sc.constraints.g * &u;
        log.min_slack = log.min_slack.min(slack.min());
        // estimator containment of the true state
        {
            let chol = nalgebra::Cholesky::new(est.p.clone())
                .ok_or_else(|| tube_mpc_core::Error::Numerical("P lost definiteness".into()))?;
            let gauge = chol.solve(&e_err).dot(&e_err);
            log.worst_containment_excess = log
                .worst_containment_excess
                .max(gauge - (1.0 - est.delta_sq));
        }
        log.p_seq.push(est.p.clone());
        log.records.push(StepRecord {
            k,
            x: x.clone(),
            xhat: est.xhat.clone(),
            xbar: xbar_k,
            u: u.clone(),
            y: y.clone(),
            w: w_applied.clone(),
            v: v_applied.clone(),
            delta_sq: est.delta_sq,
            vstar: ocp.value,
            margins: margins0,
            slack,
        });
        log.max_step_time = log.max_step_time.max(step_start.elapsed());
        if k == big_t {
            break;
        }
        // the error set at time k feeds the tube recursion
        let e_now = if p_switched {
            tight.e_tilde.clone()
        } else {
            Ellipsoid::centered(est.p.clone(), (1.0 - est.delta_sq).max(0.0).sqrt())?
        };
        // plant and measurement
        w_applied = sample(&sc.w, sc.mode, &mut rng);
        v_applied = sample(&sc.v, sc.mode, &mut rng);
        x = &sc.system.a * &x + &sc.system.b * &u + &sc.system.d * &w_applied;
        y = &sc.system.c * &x + &v_applied;
        est = measurement_update(&est, &u, &y, &sc.est_params, &sc.system)?;
        // tube recursion, then the margin freeze once the schedule has
        // settled onto its limit
        if sc.method == Method::Proposed && !frozen {
            tube = tube_advance(&tube, &e_now, &tight.dynamics)?;
            if p_switched {
                let gap = (0..d)
                    .map(|row| tight.margin_limit[row] - log.records[k].margins[row])
                    .fold(f64::NEG_INFINITY, f64::max);
                if gap <= 1e-9 {
                    frozen = true;
                }
            }
        }
    }
    log.final_nominal_norm = ctrl.xbar.norm();
    Ok(log)
}

/// Aggregate of a batch of seeded runs.
#[derive(Debug, Clone)]
pub struct MonteCarloReport {
    pub runs: usize,
    pub aborted: Vec<(usize, usize)>,
    pub min_slack: f64,
    pub worst_containment_excess: f64,
    pub worst_margin_excess: f64,
    pub worst_lyapunov_excess: f64,
    pub max_final_nominal_norm: f64,
    pub max_step_time: std::time::Duration,
    pub wall_time: std::time::Duration,
}

impl MonteCarloReport {
    pub fn all_clean(&self) -> bool {
        self.aborted.is_empty()
            && self.min_slack >= -1e-9
            && self.worst_containment_excess <= 1e-9
            && self.worst_margin_excess <= 1e-9
            && self.worst_lyapunov_excess <= 1e-6
    }
}

/// Run `n_runs` independent seeded simulations (seeds derived by counter from
/// the master seed) in parallel and aggregate order-independently.
pub fn run_monte_carlo(
    sc: &Scenario,
    synth: &Synthesis,
    n_runs: usize,
) -> Result<MonteCarloReport> {
    use rayon::prelude::*;
    let t0 = Instant::now();
    let results: Vec<(usize, std::result::Result<SimLog, HarnessError>)> = (0..n_runs)
        .into_par_iter()
        .map(|i| (i, run_closed_loop(sc, synth, sc.seed.wrapping_add(i as u64))))
        .collect();
    let mut report = MonteCarloReport {
        runs: n_runs,
        aborted: Vec::new(),
        min_slack: f64::INFINITY,
        worst_containment_excess: f64::NEG_INFINITY,
        worst_margin_excess: f64::NEG_INFINITY,
        worst_lyapunov_excess: f64::NEG_INFINITY,
        max_final_nominal_norm: 0.0,
        max_step_time: std::time::Duration::ZERO,
        wall_time: std::time::Duration::ZERO,
    };
    for (i, r) in results {
        match r {
            Ok(log) => {
                report.min_slack = report.min_slack.min(log.min_slack);
                report.worst_containment_excess = report
                    .worst_containment_excess
                    .max(log.worst_containment_excess);
                report.worst_margin_excess =
                    report.worst_margin_excess.max(log.worst_margin_excess);
                report.worst_lyapunov_excess = report
                    .worst_lyapunov_excess
                    .max(log.worst_lyapunov_excess);
                report.max_final_nominal_norm = report
                    .max_final_nominal_norm
                    .max(log.final_nominal_norm);
                report.max_step_time = report.max_step_time.max(log.max_step_time);
            }
            Err(HarnessError::MidRunInfeasible { step, .. }) => {
                report.aborted.push((i, step));
            }
            Err(e) => return Err(e),
        }
    }
    report.wall_time = t0.elapsed();
    Ok(report)
}
