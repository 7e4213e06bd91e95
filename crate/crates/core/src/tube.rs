//! Ellipsoidal control-error tube: error-bound prediction, tube recursion,
//! per-step tightening schedules and the time-invariant tightening.
//!
//! The control error `s_k = x_k - xbar_k` obeys
//! `s_{k+1} = (A + BK) s_k + w_k - BK e_k`, so its bounding set follows the
//! recursion `S_{k+1} = A_K S_k ⊕ W ⊕ -BK E_{k|k}`. The estimation-error set
//! `i` steps ahead can be bounded without future data:
//! `E_{k+i|k} = {e : e' P_{k+i|k+i}^-1 e <= 1 - (1-beta)^i (1-rho)^i delta_k^2}`.
//! Everything downstream only ever needs support values of these sets, so the
//! recursion is kept as a summand list and no Minkowski sum is formed.

use nalgebra::{DMatrix, DVector};

use crate::ellipsoid::{Ellipsoid, SummandList};
use crate::error::{Error, Result};
use crate::estimator::{shape_step, EstimatorParams, EstimatorState};
use crate::linsys::{spectral_radius, Constraints, LinearSystem};

/// Closed-loop error-dynamics data shared by the tube operations.
#[derive(Debug, Clone)]
pub struct TubeDynamics {
    /// `A + BK`.
    pub a_k: DMatrix<f64>,
    /// `BK`.
    pub bk: DMatrix<f64>,
    /// State-disturbance ellipsoid `W`.
    pub w: Ellipsoid,
    /// Rows of `F + GK`.
    pub closed_rows: DMatrix<f64>,
    /// Rows of `GK`.
    pub feedback_rows: DMatrix<f64>,
}

impl TubeDynamics {
    pub fn new(
        system: &LinearSystem,
        k_gain: &DMatrix<f64>,
        constraints: &Constraints,
        w: Ellipsoid,
    ) -> Result<Self> {
        if k_gain.nrows() != system.input_dim() || k_gain.ncols() != system.state_dim() {
            return Err(Error::DimensionMismatch("feedback gain".into()));
        }
        if w.dim() != system.state_dim() {
            return Err(Error::DimensionMismatch("disturbance ellipsoid".into()));
        }
        let a_k = &system.a + &system.b * k_gain;
        let bk = &system.b * k_gain;
        Ok(TubeDynamics {
            a_k,
            bk,
            w,
            closed_rows: constraints.closed_loop_rows(k_gain),
            feedback_rows: &constraints.g * k_gain,
        })
    }

    pub fn constraint_rows(&self) -> usize {
        self.closed_rows.nrows()
    }
}

/// Predicted estimation-error bound `(P_{k+i|k+i}, 1 - (1-beta)^i (1-rho)^i delta_k^2)`.
#[derive(Debug, Clone)]
pub struct ErrorBound {
    pub shape: DMatrix<f64>,
    pub radius_sq: f64,
}

impl ErrorBound {
    pub fn as_ellipsoid(&self) -> Result<Ellipsoid> {
        Ellipsoid::centered(self.shape.clone(), self.radius_sq.max(0.0).sqrt())
    }
}

/// Bound on the estimation error `i` steps ahead of time `k`, using only
/// information available at `k`.
pub fn error_bound(
    i: usize,
    delta_sq_k: f64,
    p_at_i: &DMatrix<f64>,
    params: &EstimatorParams,
) -> Result<ErrorBound> {
    if !(0.0..=1.0 + 1e-9).contains(&delta_sq_k) {
        return Err(Error::InvalidArgument(format!(
            "delta^2 must lie in [0, 1], got {delta_sq_k}"
        )));
    }
    let decay = ((1.0 - params.beta) * (1.0 - params.rho)).powi(i as i32);
    Ok(ErrorBound {
        shape: p_at_i.clone(),
        radius_sq: (1.0 - decay * delta_sq_k).clamp(0.0, 1.0),
    })
}

/// Shapes `P_{k+i|k+i}` for `i = 0..=horizon`, iterated from the current
/// `P_{k|k}`; data-independent, so this is the whole prediction-side input of
/// the estimator.
pub fn shape_schedule(
    p_kk: &DMatrix<f64>,
    params: &EstimatorParams,
    system: &LinearSystem,
    horizon: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let mut out = Vec::with_capacity(horizon + 1);
    out.push(p_kk.clone());
    let mut p = p_kk.clone();
    for _ in 0..horizon {
        let (_, next) = shape_step(&p, params, system)?;
        out.push(next.clone());
        p = next;
    }
    Ok(out)
}

/// Closed-loop control-error set `S_k` as a Minkowski summand list.
#[derive(Debug, Clone)]
pub struct TubeState {
    summands: SummandList,
    pub k: usize,
}

impl TubeState {
    /// `S_0 = E_{0|0}`: the initial control error equals the initial
    /// estimation error because the nominal state starts at the estimate.
    pub fn initial(e00: Ellipsoid) -> Result<Self> {
        let n = e00.dim();
        let mut summands = SummandList::new();
        summands.push(DMatrix::identity(n, n), e00)?;
        Ok(TubeState { summands, k: 0 })
    }

    pub fn summands(&self) -> &SummandList {
        &self.summands
    }

    pub fn support(&self, direction: &DVector<f64>) -> Result<f64> {
        self.summands.support(direction)
    }
}

/// Advance the closed-loop tube one step:
/// `S_{k+1} = A_K S_k ⊕ W ⊕ -BK E_{k|k}`.
///
/// The `-BK` sign is dropped: every stored set is origin-centered, hence
/// centrally symmetric, so `-BK E` and `BK E` have identical support.
pub fn tube_advance(
    tube: &TubeState,
    e_now: &Ellipsoid,
    dynamics: &TubeDynamics,
) -> Result<TubeState> {
    let mut summands = tube.summands.clone();
    summands.left_multiply(&dynamics.a_k)?;
    let n = dynamics.a_k.nrows();
    summands.push(DMatrix::identity(n, n), dynamics.w.clone())?;
    summands.push(dynamics.bk.clone(), e_now.clone())?;
    Ok(TubeState {
        summands,
        k: tube.k + 1,
    })
}

/// Per-row, per-step margin vectors: the right-hand-side shrinkage of the
/// mixed constraints over the prediction horizon.
#[derive(Debug, Clone)]
pub struct TighteningSchedule {
    /// `margins[(row, i)]` for `i = 0..=horizon`.
    pub margins: DMatrix<f64>,
    /// Margins at the end of the horizon.
    pub terminal: DVector<f64>,
}

impl TighteningSchedule {
    pub fn horizon(&self) -> usize {
        self.margins.ncols() - 1
    }

    pub fn rows(&self) -> usize {
        self.margins.nrows()
    }

    /// Margin column at prediction step `i`.
    pub fn step(&self, i: usize) -> DVector<f64> {
        self.margins.column(i).into_owned()
    }

    /// Constant schedule (used once the tube has reached steady state).
    pub fn constant(values: &DVector<f64>, horizon: usize) -> Self {
        let margins = DMatrix::from_fn(values.len(), horizon + 1, |r, _| values[r]);
        TighteningSchedule {
            margins,
            terminal: values.clone(),
        }
    }
}

/// Evaluate the worst case of `(F+GK) s_{k+i} - GK e_{k+i}` over the predicted
/// sets for `i = 0..=horizon`.
///
/// `margin[row][i] = h_{S_{k+i|k}}((F+GK)' row) + h_{E_{k+i|k}}((GK)' row)`,
/// closed form per ellipsoid summand. The `S` recursion is unrolled with the
/// predicted error bounds; nothing depends on future measurements.
pub fn prediction_schedule(
    tube: &TubeState,
    est: &EstimatorState,
    horizon: usize,
    dynamics: &TubeDynamics,
    params: &EstimatorParams,
    system: &LinearSystem,
) -> Result<TighteningSchedule> {
    if horizon < 1 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let d = dynamics.constraint_rows();
    let shapes = shape_schedule(&est.p, params, system, horizon)?;
    let mut margins = DMatrix::zeros(d, horizon + 1);
    let mut s = tube.summands.clone();
    for i in 0..=horizon {
        let e_i = error_bound(i, est.delta_sq, &shapes[i], params)?.as_ellipsoid()?;
        for row in 0..d {
            let dir_s = dynamics.closed_rows.row(row).transpose();
            let dir_e = dynamics.feedback_rows.row(row).transpose();
            margins[(row, i)] = s.support(&dir_s)? + e_i.support(&dir_e)?;
        }
        if i < horizon {
            s.left_multiply(&dynamics.a_k)?;
            let n = dynamics.a_k.nrows();
            s.push(DMatrix::identity(n, n), dynamics.w.clone())?;
            s.push(dynamics.bk.clone(), e_i)?;
        }
    }
    let terminal = margins.column(horizon).into_owned();
    Ok(TighteningSchedule { margins, terminal })
}

/// Contraction exponents and factors for the finite-sum bound on the minimal
/// RPI set: `A_K^{r1} W ⊆ alpha1 W` and likewise for the estimation-error
/// image set.
#[derive(Debug, Clone, Copy)]
pub struct ContractionParams {
    pub r1: usize,
    pub r2: usize,
    pub alpha1: f64,
    pub alpha2: f64,
}

/// Effective shape of the image set `BK E`: `BK (rho^2 P) (BK)'`, padded to
/// full rank by `1e-9 I` when `BK` is row-rank deficient so that a
/// full-dimensional bounding ellipsoid exists. Returns `None` for an exactly
/// zero image (singleton `{0}`)
fn image_shape(bk: &DMatrix<f64>, e_tilde: &Ellipsoid) -> Option<DMatrix<f64>> {
    let sigma = e_tilde.shape() * (e_tilde.radius() * e_tilde.radius());
    let img = bk * sigma * bk.transpose();
    let img = (&img + img.transpose()) * 0.5;
    if img.amax() == 0.0 {
        return None;
    }
    let n = img.nrows();
    let rank = img.clone().svd(false, false).rank(1e-12 * img.amax());
    if rank == n {
        // full row rank: the image is already full-dimensional
        Some(img)
    } else {
        Some(img + DMatrix::identity(n, n) * 1e-9)
    }
}

/// Contraction factor of the map `A` on the ellipsoid with effective shape
/// `sigma`: the largest singular value of `L^-1 A L` with `L L' = sigma`.
/// This is the exact optimum of the quadratic-over-ellipsoid maximization, so
/// no numerical optimizer is involved.
fn contraction_factor(a_pow: &DMatrix<f64>, chol_l: &DMatrix<f64>) -> Result<f64> {
    let al = a_pow * chol_l;
    let t = chol_l
        .solve_lower_triangular(&al)
        .ok_or_else(|| Error::Numerical("singular shape factor".into()))?;
    let m = t.tr_mul(&t);
    let m = (&m + m.transpose()) * 0.5;
    Ok(m.symmetric_eigenvalues().max().max(0.0).sqrt())
}

fn smallest_contracting_power(
    a_k: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    alpha_cap: f64,
    map: Option<&DMatrix<f64>>,
) -> Result<(usize, f64)> {
    let chol = nalgebra::Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::Numerical("contraction shape not positive definite".into()))?;
    let l = chol.l();
    let mut a_pow = a_k.clone();
    let mut best = f64::INFINITY;
    for r in 1..=500 {
        let effective = match map {
            Some(p) => p * &a_pow,
            None => a_pow.clone(),
        };
        let alpha = contraction_factor(&effective, &l)?;
        if alpha <= alpha_cap {
            return Ok((r, alpha));
        }
        best = best.min(alpha);
        a_pow = &a_pow * a_k;
    }
    Err(Error::NoConvergence(format!(
        "contraction cap {alpha_cap} unreachable within r <= 500 (best alpha {best})"
    )))
}

/// Find the smallest powers `r1`, `r2` meeting the contraction cap.
///
/// For the estimation-error part with `theta = BK`: when `theta` has full row
/// rank the condition is conjugated with the Moore-Penrose pseudoinverse;
/// otherwise the image set is over-approximated by a full-dimensional
/// ellipsoid first (see [`image_shape`]).
pub fn contraction_params(
    dynamics: &TubeDynamics,
    e_tilde: &Ellipsoid,
    alpha_cap: f64,
) -> Result<ContractionParams> {
    if !(0.0 < alpha_cap && alpha_cap < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha_cap must lie in (0, 1), got {alpha_cap}"
        )));
    }
    let rho_a = spectral_radius(&dynamics.a_k);
    if rho_a >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "A + BK must be stable, spectral radius {rho_a}"
        )));
    }
    let n = dynamics.a_k.nrows();
    // disturbance part
    let (r1, alpha1) = if dynamics.w.radius() == 0.0 {
        (1, 0.0)
    } else {
        let sigma_w = dynamics.w.shape() * (dynamics.w.radius() * dynamics.w.radius());
        smallest_contracting_power(&dynamics.a_k, &sigma_w, alpha_cap, None)?
    };
    // estimation-error image part
    let (r2, alpha2) = match image_shape(&dynamics.bk, e_tilde) {
        None => (1, 0.0),
        Some(img) => {
            let svd = dynamics.bk.clone().svd(true, true);
            let full_rank = svd.rank(1e-12 * dynamics.bk.amax().max(1.0)) == n;
            if full_rank {
                let pinv = svd
                    .pseudo_inverse(1e-12)
                    .map_err(|e| Error::Numerical(format!("pseudoinverse: {e}")))?;
                let sigma_e = e_tilde.shape() * (e_tilde.radius() * e_tilde.radius());
                // condition on theta^+ A^r theta over the original set
                let theta = dynamics.bk.clone();
                let chol = nalgebra::Cholesky::new(sigma_e.clone())
                    .ok_or_else(|| Error::Numerical("estimation shape not PD".into()))?;
                let l = chol.l();
                let mut a_pow = dynamics.a_k.clone();
                let mut found = None;
                let mut best = f64::INFINITY;
                for r in 1..=500 {
                    let eff = &pinv * &a_pow * &theta;
                    let alpha = contraction_factor(&eff, &l)?;
                    if alpha <= alpha_cap {
                        found = Some((r, alpha));
                        break;
                    }
                    best = best.min(alpha);
                    a_pow = &a_pow * &dynamics.a_k;
                }
                found.ok_or_else(|| {
                    Error::NoConvergence(format!(
                        "contraction cap {alpha_cap} unreachable within r <= 500 (best alpha {best})"
                    ))
                })?
            } else {
                smallest_contracting_power(&dynamics.a_k, &img, alpha_cap, None)?
            }
        }
    };
    Ok(ContractionParams {
        r1,
        r2,
        alpha1,
        alpha2,
    })
}

/// Time-invariant tightening from the finite-sum RPI over-approximation:
///
/// `row = (1-alpha1)^-1 Σ_{j<r1} h_W((A_K^j)'(F+GK)'row)
///      + (1-alpha2)^-1 Σ_{j<r2} h_{E'}((A_K^j)'(F+GK)'row)
///      + h_{E~}((GK)'row)`,
///
/// where `E'` is the (padded) image of `E~` under `BK`. This dominates every
/// finite-step schedule margin in steady state.
pub fn time_invariant_tightening(
    cp: &ContractionParams,
    dynamics: &TubeDynamics,
    e_tilde: &Ellipsoid,
) -> Result<DVector<f64>> {
    let d = dynamics.constraint_rows();
    let img = image_shape(&dynamics.bk, e_tilde).map(|s| Ellipsoid::centered(s, 1.0));
    let img = match img {
        Some(e) => Some(e?),
        None => None,
    };
    let mut out = DVector::zeros(d);
    for row in 0..d {
        let base = dynamics.closed_rows.row(row).transpose();
        let mut total = 0.0;
        let mut dir = base.clone();
        for _ in 0..cp.r1 {
            total += dynamics.w.support(&dir)? / (1.0 - cp.alpha1);
            dir = dynamics.a_k.tr_mul(&dir);
        }
        if let Some(img) = &img {
            let mut dir = base.clone();
            for _ in 0..cp.r2 {
                total += img.support(&dir)? / (1.0 - cp.alpha2);
                dir = dynamics.a_k.tr_mul(&dir);
            }
        }
        total += e_tilde.support(&dynamics.feedback_rows.row(row).transpose())?;
        out[row] = total;
    }
    Ok(out)
}

/// Limit of the steady-state schedule margins: iterate
/// `S_{t+1} = A_K S_t ⊕ W ⊕ BK E~` from `S_0 = E~` until every row settles.
///
/// The accumulated part of the support telescopes, so each step costs one
/// direction update per row. Geometric convergence is guaranteed for a stable
/// `A_K`; the limit is what the per-step schedule approaches from below, and
/// freezing at it (rather than at the coarser finite-sum bound) keeps the
/// schedule monotone across re-anchoring.
pub fn steady_schedule_limit(
    dynamics: &TubeDynamics,
    e_tilde: &Ellipsoid,
    tol: f64,
) -> Result<DVector<f64>> {
    let d = dynamics.constraint_rows();
    let mut acc = DVector::<f64>::zeros(d);
    let mut dirs: Vec<DVector<f64>> = (0..d)
        .map(|row| dynamics.closed_rows.row(row).transpose())
        .collect();
    let bk_t = dynamics.bk.transpose();
    let mut last = DVector::<f64>::from_element(d, f64::INFINITY);
    for _ in 0..100_000 {
        let mut current = DVector::<f64>::zeros(d);
        for row in 0..d {
            // S_t = A^t E~ ⊕ Σ_{j<t} A^j (W ⊕ BK E~): leftover plus accumulated
            let leftover = e_tilde.support(&dirs[row])?;
            let e_term = e_tilde.support(&dynamics.feedback_rows.row(row).transpose())?;
            current[row] = acc[row] + leftover + e_term;
        }
        let delta = (&current - &last).amax();
        last = current;
        if delta < tol {
            return Ok(last);
        }
        for row in 0..d {
            acc[row] += dynamics.w.support(&dirs[row])?
                + e_tilde.support(&(&bk_t * &dirs[row]))?;
            dirs[row] = dynamics.a_k.tr_mul(&dirs[row]);
        }
    }
    Err(Error::NoConvergence(
        "steady-state schedule margins did not settle".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params_half() -> EstimatorParams {
        EstimatorParams::new(
            0.5,
            0.5,
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    #[test]
    fn error_bound_at_zero_steps_is_current_set() {
        let p = DMatrix::from_element(1, 1, 2.0);
        let b = error_bound(0, 0.3, &p, &params_half()).unwrap();
        assert_relative_eq!(b.radius_sq, 0.7, max_relative = 1e-15);
        assert_eq!(b.shape[(0, 0)], 2.0);
    }

    #[test]
    fn error_bound_no_information_decays_to_one() {
        let p = DMatrix::identity(1, 1);
        for i in 0..10 {
            let b = error_bound(i, 0.0, &p, &params_half()).unwrap();
            assert_eq!(b.radius_sq, 1.0);
        }
    }

    #[test]
    fn error_bound_formula() {
        let p = DMatrix::identity(1, 1);
        let b = error_bound(2, 0.8, &p, &params_half()).unwrap();
        assert_relative_eq!(b.radius_sq, 1.0 - 0.0625 * 0.8, max_relative = 1e-15);
    }

    #[test]
    fn error_bound_monotone_in_steps() {
        let p = DMatrix::identity(1, 1);
        let mut prev = 0.0;
        for i in 0..20 {
            let b = error_bound(i, 0.9, &p, &params_half()).unwrap();
            assert!(b.radius_sq >= prev);
            prev = b.radius_sq;
        }
    }

    fn scalar_dynamics(a_k: f64, w_radius: f64) -> TubeDynamics {
        let system = LinearSystem::new(
            DMatrix::from_element(1, 1, a_k),
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::identity(1, 1),
            None,
        )
        .unwrap();
        let constraints = Constraints::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        TubeDynamics::new(
            &system,
            &DMatrix::from_element(1, 1, 0.0),
            &constraints,
            Ellipsoid::ball(1, w_radius).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn tube_geometric_series() {
        // a_K = 0.5, W = [-1, 1], E = {0}: support of S_k at c=1 is 2(1 - 0.5^k)
        let dynamics = scalar_dynamics(0.5, 1.0);
        let e_zero = Ellipsoid::ball(1, 0.0).unwrap();
        let mut tube = TubeState::initial(e_zero.clone()).unwrap();
        let c = DVector::from_element(1, 1.0);
        assert_eq!(tube.support(&c).unwrap(), 0.0);
        for k in 1..=8 {
            tube = tube_advance(&tube, &e_zero, &dynamics).unwrap();
            assert_relative_eq!(
                tube.support(&c).unwrap(),
                2.0 * (1.0 - 0.5f64.powi(k)),
                max_relative = 1e-13
            );
        }
        assert_eq!(tube.k, 8);
        assert_eq!(tube.summands().len(), 1 + 2 * 8);
    }

    #[test]
    fn tube_deadbeat_collapse() {
        let dynamics = scalar_dynamics(0.0, 1.0);
        let e0 = Ellipsoid::ball(1, 3.0).unwrap();
        let tube = TubeState::initial(e0.clone()).unwrap();
        let next = tube_advance(&tube, &e0, &dynamics).unwrap();
        // A_K = 0 wipes the history: support = h_W(c) + h_{BK E}(c) = 1 + 0
        let c = DVector::from_element(1, 1.0);
        assert_relative_eq!(next.support(&c).unwrap(), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn tube_initialization_is_e00() {
        let e0 = Ellipsoid::ball(2, 0.7).unwrap();
        let tube = TubeState::initial(e0.clone()).unwrap();
        let c = DVector::from_vec(vec![0.6, 0.8]);
        assert_relative_eq!(
            tube.support(&c).unwrap(),
            e0.support(&c).unwrap(),
            max_relative = 1e-15
        );
    }

    fn double_integrator() -> (LinearSystem, DMatrix<f64>, Constraints) {
        let system = LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            None,
        )
        .unwrap();
        let k_gain = DMatrix::from_row_slice(1, 2, &[-0.6136, -0.9962]);
        let constraints = Constraints::new(
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]),
            DVector::from_vec(vec![3.0, 3.0, 3.0]),
        )
        .unwrap();
        (system, k_gain, constraints)
    }

    #[test]
    fn schedule_state_only_rows_reduce_to_tube_support() {
        // K = 0 and G = 0: margin row is the support of S in F' row
        let (system, _, _) = double_integrator();
        let k_zero = DMatrix::zeros(1, 2);
        let constraints = Constraints::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(1, 1),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let w = Ellipsoid::ball(2, 0.1).unwrap();
        let dynamics = TubeDynamics::new(&system, &k_zero, &constraints, w).unwrap();
        let params = EstimatorParams::new(
            0.4,
            0.3,
            DMatrix::identity(2, 2) * 0.01,
            DMatrix::identity(1, 1) * 0.0025,
        )
        .unwrap();
        let e0 = Ellipsoid::ball(2, 0.2).unwrap();
        let tube = TubeState::initial(e0.clone()).unwrap();
        let est = EstimatorState::initial(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let sched = prediction_schedule(&tube, &est, 4, &dynamics, &params, &system).unwrap();
        let c = DVector::from_vec(vec![1.0, 0.0]);
        assert_relative_eq!(
            sched.margins[(0, 0)],
            tube.support(&c).unwrap(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn schedule_no_uncertainty_is_zero() {
        let (system, k_gain, constraints) = double_integrator();
        let w = Ellipsoid::ball(2, 0.0).unwrap();
        let dynamics = TubeDynamics::new(&system, &k_gain, &constraints, w).unwrap();
        // vanishing disturbance shapes keep the whole shape recursion tiny
        let params = EstimatorParams::new(
            0.4,
            0.3,
            DMatrix::identity(2, 2) * 1e-14,
            DMatrix::identity(1, 1) * 1e-14,
        )
        .unwrap();
        // exact initial state and (numerically) zero-size error sets
        let e0 = Ellipsoid::ball(2, 0.0).unwrap();
        let tube = TubeState::initial(e0).unwrap();
        let est = EstimatorState {
            xhat: DVector::zeros(2),
            p: DMatrix::identity(2, 2) * 1e-14,
            delta_sq: 0.0,
            k: 0,
        };
        let sched = prediction_schedule(&tube, &est, 3, &dynamics, &params, &system).unwrap();
        // W and S are zero-sized; the only residue is the vanishing P scale
        assert!(sched.margins.amax() < 1e-5);
    }

    #[test]
    fn contraction_nilpotent() {
        let system = LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::zeros(2, 1),
            DMatrix::identity(2, 2),
            None,
        )
        .unwrap();
        let constraints = Constraints::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DVector::from_element(2, 1.0),
        )
        .unwrap();
        let dynamics = TubeDynamics::new(
            &system,
            &DMatrix::zeros(1, 2),
            &constraints,
            Ellipsoid::ball(2, 1.0).unwrap(),
        )
        .unwrap();
        let e_tilde = Ellipsoid::ball(2, 1.0).unwrap();
        let cp = contraction_params(&dynamics, &e_tilde, 0.05).unwrap();
        assert_eq!(cp.r1, 2);
        assert_eq!(cp.alpha1, 0.0);
    }

    #[test]
    fn contraction_scalar_powers_exact() {
        let dynamics = scalar_dynamics(0.5, 1.0);
        let e_tilde = Ellipsoid::ball(1, 1.0).unwrap();
        let cp = contraction_params(&dynamics, &e_tilde, 0.05).unwrap();
        assert_eq!(cp.r1, 5);
        assert!((cp.alpha1 - 0.03125).abs() <= 1e-12);
    }

    #[test]
    fn contraction_unreachable_cap_reports_alpha() {
        let dynamics = scalar_dynamics(0.9999999, 1.0);
        let e_tilde = Ellipsoid::ball(1, 1.0).unwrap();
        match contraction_params(&dynamics, &e_tilde, 0.05) {
            Err(Error::NoConvergence(msg)) => assert!(msg.contains("best alpha")),
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn tightening_deadbeat_one_step_sum() {
        let (system, k_gain, constraints) = double_integrator();
        // deadbeat error dynamics: replace A with BK so A_K = 0 is emulated by
        // a zero-gain system instead
        let sys0 = LinearSystem::new(
            DMatrix::zeros(2, 2),
            system.b.clone(),
            system.c.clone(),
            None,
        )
        .unwrap();
        let w = Ellipsoid::ball(2, 0.3).unwrap();
        let dynamics = TubeDynamics::new(&sys0, &(k_gain.clone() * 0.0), &constraints, w.clone())
            .unwrap();
        let e_tilde = Ellipsoid::ball(2, 0.2).unwrap();
        let cp = contraction_params(&dynamics, &e_tilde, 0.05).unwrap();
        assert_eq!((cp.r1, cp.r2), (1, 1));
        let t = time_invariant_tightening(&cp, &dynamics, &e_tilde).unwrap();
        // zero gain: image of BK E is {0}; rows reduce to h_W(F'row)
        for row in 0..3 {
            let dir = dynamics.closed_rows.row(row).transpose();
            assert_relative_eq!(t[row], w.support(&dir).unwrap(), max_relative = 1e-12);
        }
    }

    #[test]
    fn tightening_zero_sets_is_zero() {
        let (system, k_gain, constraints) = double_integrator();
        let w = Ellipsoid::ball(2, 0.0).unwrap();
        let dynamics = TubeDynamics::new(&system, &k_gain, &constraints, w).unwrap();
        let e_tilde = Ellipsoid::ball(2, 0.0).unwrap();
        let cp = contraction_params(&dynamics, &e_tilde, 0.05).unwrap();
        let t = time_invariant_tightening(&cp, &dynamics, &e_tilde).unwrap();
        assert!(t.amax() == 0.0);
    }

    #[test]
    fn tightening_monotone_in_contraction_order() {
        // larger r (smaller alpha) never increases any row
        let (system, k_gain, constraints) = double_integrator();
        let w = Ellipsoid::ball(2, 0.25).unwrap();
        let dynamics = TubeDynamics::new(&system, &k_gain, &constraints, w).unwrap();
        let e_tilde = Ellipsoid::centered(DMatrix::identity(2, 2) * 0.09, 1.0).unwrap();
        let loose = contraction_params(&dynamics, &e_tilde, 0.4).unwrap();
        let tight = contraction_params(&dynamics, &e_tilde, 0.01).unwrap();
        assert!(tight.r1 >= loose.r1 && tight.r2 >= loose.r2);
        let t_loose = time_invariant_tightening(&loose, &dynamics, &e_tilde).unwrap();
        let t_tight = time_invariant_tightening(&tight, &dynamics, &e_tilde).unwrap();
        for row in 0..t_loose.len() {
            assert!(t_tight[row] <= t_loose[row] + 1e-12);
        }
    }

    #[test]
    fn steady_limit_matches_long_schedule() {
        let (system, k_gain, constraints) = double_integrator();
        let w = Ellipsoid::ball(2, 0.25).unwrap();
        let dynamics = TubeDynamics::new(&system, &k_gain, &constraints, w).unwrap();
        let p_inf = DMatrix::from_row_slice(2, 2, &[0.316175, -0.214941, -0.214941, 0.341663]);
        let e_tilde = Ellipsoid::centered(p_inf.clone(), 1.0).unwrap();
        let limit = steady_schedule_limit(&dynamics, &e_tilde, 1e-13).unwrap();
        // unrolled recursion approaches the limit from below
        let params = EstimatorParams::new(
            0.392,
            0.246,
            DMatrix::identity(2, 2) * 0.0625,
            DMatrix::identity(1, 1) * 0.0625,
        )
        .unwrap();
        let est = EstimatorState {
            xhat: DVector::zeros(2),
            p: p_inf.clone(),
            delta_sq: 0.0,
            k: 0,
        };
        let tube = TubeState::initial(e_tilde.clone()).unwrap();
        // the shape recursion moves P slightly off the frozen p_inf surrogate,
        // so compare against a long horizon with a loose tolerance
        let sched =
            prediction_schedule(&tube, &est, 60, &dynamics, &params, &system).unwrap();
        for row in 0..limit.len() {
            let tail = sched.margins[(row, 60)];
            assert!(tail <= limit[row] + 1e-5, "row {row}: {tail} vs {}", limit[row]);
            assert!(limit[row] - tail < 2e-2);
        }
    }
}
