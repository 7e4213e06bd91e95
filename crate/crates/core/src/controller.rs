//! Terminal-ingredient synthesis, the condensed optimal control problem, and
//! the receding-horizon control law.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::linsys::{spectral_radius, Constraints, CostWeights, LinearSystem};
use crate::lp::{max_linear, LpOutcome};
use crate::qp;
use crate::tube::TighteningSchedule;

/// Polytope `{x : H x <= h}` in halfspace form.
#[derive(Debug, Clone)]
pub struct Polytope {
    pub h_mat: DMatrix<f64>,
    pub h_vec: DVector<f64>,
}

impl Polytope {
    pub fn new(h_mat: DMatrix<f64>, h_vec: DVector<f64>) -> Result<Self> {
        if h_mat.nrows() != h_vec.len() {
            return Err(Error::DimensionMismatch("polytope rows".into()));
        }
        Ok(Polytope { h_mat, h_vec })
    }

    pub fn dim(&self) -> usize {
        self.h_mat.ncols()
    }

    pub fn rows(&self) -> usize {
        self.h_mat.nrows()
    }

    pub fn contains(&self, x: &DVector<f64>, slack: f64) -> bool {
        let r = &self.h_mat * x - &self.h_vec;
        r.max() <= slack
    }

    /// Interior points by hit-and-run from the origin (which must be strictly
    /// inside). Walks are clipped to a large box so unbounded directions stay
    /// harmless.
    pub fn sample_interior<R: Rng>(
        &self,
        rng: &mut R,
        count: usize,
        thin: usize,
    ) -> Vec<DVector<f64>> {
        let n = self.dim();
        let mut x = DVector::zeros(n);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            for _ in 0..thin.max(1) {
                let mut dir = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0f64));
                let nrm = dir.norm();
                if nrm == 0.0 {
                    continue;
                }
                dir /= nrm;
                let hx = &self.h_mat * &x;
                let hd = &self.h_mat * &dir;
                let mut t_lo = -1e3f64;
                let mut t_hi = 1e3f64;
                for i in 0..self.rows() {
                    let room = self.h_vec[i] - hx[i];
                    if hd[i] > 1e-14 {
                        t_hi = t_hi.min(room / hd[i]);
                    } else if hd[i] < -1e-14 {
                        t_lo = t_lo.max(room / hd[i]);
                    }
                }
                if t_hi > t_lo {
                    let t = rng.random_range(t_lo..t_hi);
                    x += dir * t;
                }
            }
            out.push(x.clone());
        }
        out
    }
}

/// Maximal positive invariant set of `x+ = A_K x` inside `{H x <= h}`.
///
/// Grows the row set with `H A_K^t` and stops once every candidate row is
/// certified redundant by maximizing it over the current polytope (a small
/// dense LP, capped by the candidate bound so it stays finite even when the
/// intermediate polytope is unbounded).
pub fn max_positive_invariant(
    a_k: &DMatrix<f64>,
    h_mat: &DMatrix<f64>,
    h_vec: &DVector<f64>,
    iter_cap: usize,
) -> Result<Polytope> {
    let rho = spectral_radius(a_k);
    if rho >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "A_K must be stable, spectral radius {rho}"
        )));
    }
    if h_vec.min() <= 0.0 {
        return Err(Error::InvalidArgument(
            "constraint polytope must contain the origin strictly (empty interior)".into(),
        ));
    }
    let d = h_mat.nrows();
    let mut rows = h_mat.clone();
    let mut rhs = h_vec.clone();
    let mut a_pow = a_k.clone();
    for _ in 0..iter_cap {
        let candidates = h_mat * &a_pow;
        let mut fresh: Vec<usize> = Vec::new();
        for i in 0..d {
            let c = candidates.row(i).transpose();
            let bound = h_vec[i];
            // cap the LP with the candidate row itself to keep it bounded
            let nr = rows.nrows();
            let mut capped = DMatrix::zeros(nr + 1, rows.ncols());
            capped.view_mut((0, 0), (nr, rows.ncols())).copy_from(&rows);
            capped
                .view_mut((nr, 0), (1, rows.ncols()))
                .copy_from(&candidates.row(i));
            let mut capped_rhs = DVector::zeros(nr + 1);
            capped_rhs.rows_mut(0, nr).copy_from(&rhs);
            capped_rhs[nr] = bound + 1.0;
            let redundant = match max_linear(&capped, &capped_rhs, &c)? {
                LpOutcome::Optimal(v) => v <= bound + 1e-9 * (1.0 + bound.abs()),
                LpOutcome::Unbounded => false,
            };
            if !redundant {
                fresh.push(i);
            }
        }
        if fresh.is_empty() {
            return Polytope::new(rows, rhs);
        }
        let old = rows.nrows();
        let mut grown = DMatrix::zeros(old + fresh.len(), rows.ncols());
        grown.view_mut((0, 0), (old, rows.ncols())).copy_from(&rows);
        let mut grown_rhs = DVector::zeros(old + fresh.len());
        grown_rhs.rows_mut(0, old).copy_from(&rhs);
        for (t, &i) in fresh.iter().enumerate() {
            grown
                .view_mut((old + t, 0), (1, rows.ncols()))
                .copy_from(&candidates.row(i));
            grown_rhs[old + t] = h_vec[i];
        }
        rows = grown;
        rhs = grown_rhs;
        a_pow = &a_pow * a_k;
    }
    Err(Error::NoConvergence(format!(
        "invariant set not finitely determined within {iter_cap} rounds"
    )))
}

/// Terminal cost and terminal set.
#[derive(Debug, Clone)]
pub struct TerminalIngredients {
    /// Terminal cost matrix (the Riccati cost-to-go).
    pub cost: DMatrix<f64>,
    /// Terminal constraint set on the nominal state.
    pub set: Polytope,
}

/// Synthesize the terminal ingredients for the tightened problem.
///
/// The terminal set is the maximal positive invariant set of `A + BK` inside
/// `{(F+GK) x <= f - f_bar}`; a nonpositive entry of `f - f_bar` means the
/// tightening has consumed the whole constraint and synthesis fails. The
/// cost/gain pair must come from the same Riccati solve: the decrease
/// condition `p(A_K x) - p(x) + q(x, Kx) <= 0` is verified on sampled members
/// of the set and holds with equality margin only for the consistent pair.
pub fn terminal_ingredients(
    system: &LinearSystem,
    weights: &CostWeights,
    k_gain: &DMatrix<f64>,
    f_bar: &DVector<f64>,
    constraints: &Constraints,
) -> Result<TerminalIngredients> {
    if f_bar.len() != constraints.rows() {
        return Err(Error::DimensionMismatch("terminal tightening length".into()));
    }
    let shrunk = &constraints.bound - f_bar;
    let bad: Vec<usize> = (0..shrunk.len()).filter(|&i| shrunk[i] <= 0.0).collect();
    if !bad.is_empty() {
        return Err(Error::InfeasibleTightening {
            rows: bad.clone(),
            detail: format!(
                "tightening exceeds the constraint bound (remaining {:?})",
                bad.iter().map(|&i| shrunk[i]).collect::<Vec<_>>()
            ),
        });
    }
    let a_k = &system.a + &system.b * k_gain;
    let h_mat = constraints.closed_loop_rows(k_gain);
    let set = max_positive_invariant(&a_k, &h_mat, &shrunk, 200)?;
    // decrease-condition residual on sampled members
    let m = a_k.tr_mul(&weights.terminal) * &a_k - &weights.terminal
        + &weights.state
        + k_gain.tr_mul(&weights.input) * k_gain;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x7e51);
    let samples = set.sample_interior(&mut rng, 1000, 3);
    for x in &samples {
        let residual = 0.5 * x.dot(&(&m * x));
        if residual > 1e-8 {
            return Err(Error::Synthesis(format!(
                "terminal cost does not decrease along the feedback (residual {residual:.3e}); \
                 the gain and terminal cost must come from the same Riccati solve"
            )));
        }
    }
    Ok(TerminalIngredients {
        cost: weights.terminal.clone(),
        set,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcpStatus {
    Optimal,
    Infeasible,
}

/// Solution of the finite-horizon optimal control problem.
#[derive(Debug, Clone)]
pub struct OcpSolution {
    /// Planned nominal inputs, one column per step (m x N).
    pub ubar: DMatrix<f64>,
    /// Planned nominal states (n x (N+1)), reconstructed through the
    /// dynamics rather than solved for.
    pub xbar: DMatrix<f64>,
    /// Optimal cost; nonnegative for positive-definite weights.
    pub value: f64,
    pub status: OcpStatus,
}

impl OcpSolution {
    fn infeasible(n: usize, m: usize, horizon: usize) -> Self {
        OcpSolution {
            ubar: DMatrix::zeros(m, horizon),
            xbar: DMatrix::zeros(n, horizon + 1),
            value: f64::INFINITY,
            status: OcpStatus::Infeasible,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == OcpStatus::Optimal
    }
}

/// Build the condensed QP over the input sequence and solve it.
///
/// States are eliminated through the dynamics, so the Hessian is positive
/// definite whenever the input weight is. Stage rows carry the schedule
/// margins for steps `0..N-1`; the step-`N` tightening is folded into the
/// terminal set. Infeasibility is a status, not an error: the caller decides
/// what an infeasible problem means.
pub fn build_and_solve_ocp(
    xbar_k: &DVector<f64>,
    schedule: &TighteningSchedule,
    system: &LinearSystem,
    weights: &CostWeights,
    constraints: &Constraints,
    terminal: &Polytope,
    horizon: usize,
) -> Result<OcpSolution> {
    let n = system.state_dim();
    let m = system.input_dim();
    let d = constraints.rows();
    if schedule.horizon() < horizon {
        return Err(Error::InvalidArgument(format!(
            "schedule covers {} steps, horizon needs {}",
            schedule.horizon(),
            horizon
        )));
    }
    if schedule.rows() != d {
        return Err(Error::DimensionMismatch("schedule vs constraint rows".into()));
    }
    // powers of A and the free response
    let mut a_pow: Vec<DMatrix<f64>> = Vec::with_capacity(horizon + 1);
    a_pow.push(DMatrix::identity(n, n));
    for i in 0..horizon {
        let next = &system.a * &a_pow[i];
        a_pow.push(next);
    }
    let free: Vec<DVector<f64>> = (0..=horizon).map(|i| &a_pow[i] * xbar_k).collect();
    // input-to-state map: block (i, j) = A^(i-1-j) B for j < i
    let mut su = DMatrix::zeros(n * (horizon + 1), m * horizon);
    for i in 1..=horizon {
        for j in 0..i {
            let blk = &a_pow[i - 1 - j] * &system.b;
            su.view_mut((i * n, j * m), (n, m)).copy_from(&blk);
        }
    }
    // stacked weights: stage costs then the terminal cost
    let mut qbar = DMatrix::zeros(n * (horizon + 1), n * (horizon + 1));
    for i in 0..horizon {
        qbar.view_mut((i * n, i * n), (n, n)).copy_from(&weights.state);
    }
    qbar.view_mut((horizon * n, horizon * n), (n, n))
        .copy_from(&weights.terminal);
    let mut xfree = DVector::zeros(n * (horizon + 1));
    for (i, f) in free.iter().enumerate() {
        xfree.rows_mut(i * n, n).copy_from(f);
    }
    let qbar_su = &qbar * &su;
    let mut hess = su.tr_mul(&qbar_su);
    for i in 0..horizon {
        let mut blk = hess.view_mut((i * m, i * m), (m, m));
        blk += &weights.input;
    }
    let hess = (&hess + hess.transpose()) * 0.5;
    let lin = qbar_su.tr_mul(&xfree);
    let constant = 0.5 * xfree.dot(&(&qbar * &xfree));
    // inequality rows: d per stage plus the terminal set
    let n_rows = d * horizon + terminal.rows();
    let mut g_mat = DMatrix::zeros(n_rows, m * horizon);
    let mut h_vec = DVector::zeros(n_rows);
    for i in 0..horizon {
        let su_i = su.view((i * n, 0), (n, m * horizon));
        let block = &constraints.f * su_i;
        g_mat.view_mut((i * d, 0), (d, m * horizon)).copy_from(&block);
        for r in 0..d {
            for cc in 0..m {
                g_mat[(i * d + r, i * m + cc)] += constraints.g[(r, cc)];
            }
        }
        let margin = schedule.step(i);
        let f_free = &constraints.f * &free[i];
        for r in 0..d {
            h_vec[i * d + r] = constraints.bound[r] - margin[r] - f_free[r];
        }
    }
    {
        let su_n = su.view((horizon * n, 0), (n, m * horizon));
        let block = &terminal.h_mat * su_n;
        g_mat
            .view_mut((d * horizon, 0), (terminal.rows(), m * horizon))
            .copy_from(&block);
        let rhs = &terminal.h_vec - &terminal.h_mat * &free[horizon];
        h_vec.rows_mut(d * horizon, terminal.rows()).copy_from(&rhs);
    }
    let outcome = qp::solve(&hess, &lin, &g_mat, &h_vec)?;
    let sol = match outcome {
        qp::QpOutcome::Infeasible => return Ok(OcpSolution::infeasible(n, m, horizon)),
        qp::QpOutcome::Optimal(s) => s,
    };
    let scale = 1.0 + lin.amax().max(h_vec.amax());
    if sol.kkt_residual > 1e-8 * scale {
        return Err(Error::Numerical(format!(
            "OCP solver residual {:.3e} exceeds the 1e-8 relative contract (scale {scale:.3e})",
            sol.kkt_residual
        )));
    }
    let u = sol.x;
    let mut ubar = DMatrix::zeros(m, horizon);
    for i in 0..horizon {
        ubar.column_mut(i).copy_from(&u.rows(i * m, m));
    }
    let mut xbar = DMatrix::zeros(n, horizon + 1);
    xbar.column_mut(0).copy_from(xbar_k);
    for i in 0..horizon {
        let next = &system.a * xbar.column(i) + &system.b * ubar.column(i);
        xbar.column_mut(i + 1).copy_from(&next);
    }
    let value = (0.5 * u.dot(&(&hess * &u)) + lin.dot(&u) + constant).max(0.0);
    Ok(OcpSolution {
        ubar,
        xbar,
        value,
        status: OcpStatus::Optimal,
    })
}

/// Receding-horizon controller state: the nominal trajectory anchor and the
/// ancillary feedback gain.
#[derive(Debug, Clone)]
pub struct Controller {
    pub xbar: DVector<f64>,
    pub k_gain: DMatrix<f64>,
}

impl Controller {
    /// The nominal state starts at the initial estimate.
    pub fn new(xhat0: DVector<f64>, k_gain: DMatrix<f64>) -> Self {
        Controller { xbar: xhat0, k_gain }
    }

    /// Apply `u = ubar*_0 + K (xhat - xbar)` and advance the nominal state.
    pub fn control_step(
        &mut self,
        system: &LinearSystem,
        xhat: &DVector<f64>,
        ocp: &OcpSolution,
    ) -> Result<DVector<f64>> {
        if ocp.status != OcpStatus::Optimal {
            return Err(Error::ContractViolation(
                "control_step called with a non-optimal OCP solution".into(),
            ));
        }
        let ubar0 = ocp.ubar.column(0).into_owned();
        let u = &ubar0 + &self.k_gain * (xhat - &self.xbar);
        self.xbar = &system.a * &self.xbar + &system.b * &ubar0;
        Ok(u)
    }
}
