//! Set-membership state estimation with ellipsoidal bounds.
//!
//! The estimator maintains `x_k ∈ {x : (x - xhat_k)' P_kk^-1 (x - xhat_k) <= 1 - delta_k^2}`.
//! The shape recursion never sees measured data, so `P_kk` can be precomputed
//! and converges to a steady state; only the center and the scalar
//! `delta_k^2` are data-driven.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linsys::LinearSystem;

/// Mixing parameters and disturbance shapes for the estimator.
///
/// `W = {w : w' q_shape^-1 w <= 1}` and `V = {v : v' r_shape^-1 v <= 1}`;
/// the disturbance input map `D` is taken from the [`LinearSystem`].
#[derive(Debug, Clone)]
pub struct EstimatorParams {
    pub beta: f64,
    pub rho: f64,
    pub q_shape: DMatrix<f64>,
    pub r_shape: DMatrix<f64>,
}

impl EstimatorParams {
    pub fn new(beta: f64, rho: f64, q_shape: DMatrix<f64>, r_shape: DMatrix<f64>) -> Result<Self> {
        if !(0.0 < beta && beta < 1.0) || !(0.0 < rho && rho < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta and rho must lie in (0, 1), got beta={beta}, rho={rho}"
            )));
        }
        for (name, m) in [("q_shape", &q_shape), ("r_shape", &r_shape)] {
            if nalgebra::Cholesky::new(m.clone()).is_none() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive definite"
                )));
            }
        }
        Ok(EstimatorParams {
            beta,
            rho,
            q_shape,
            r_shape,
        })
    }
}

/// Estimator state `(xhat, P_kk, delta_k^2)` at time index `k`.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    pub xhat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub delta_sq: f64,
    pub k: usize,
}

impl EstimatorState {
    /// Initial state with `delta_0^2 = 0` and `P_00 = psi`.
    pub fn initial(xhat0: DVector<f64>, psi: DMatrix<f64>) -> Result<Self> {
        if nalgebra::Cholesky::new(psi.clone()).is_none() {
            return Err(Error::InvalidArgument("psi must be positive definite".into()));
        }
        Ok(EstimatorState {
            xhat: xhat0,
            p: psi,
            delta_sq: 0.0,
            k: 0,
        })
    }
}

fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(m.clone()).ok_or_else(|| {
        // rough conditioning diagnostic from the diagonal spread
        let dmax = (0..m.nrows()).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
        let dmin = (0..m.nrows())
            .map(|i| m[(i, i)].abs())
            .fold(f64::INFINITY, f64::min);
        Error::Numerical(format!(
            "{what} not invertible (diagonal spread {:.3e})",
            dmax / dmin.max(f64::MIN_POSITIVE)
        ))
    })?;
    Ok(chol.inverse())
}

/// One step of the shape recursion.
///
/// `P_pred = (1-beta)^-1 A P A' + beta^-1 D Q D'` and
/// `P_next = [(1-rho) P_pred^-1 + rho C' R^-1 C]^-1`, both symmetrized.
pub fn shape_step(
    p_kk: &DMatrix<f64>,
    params: &EstimatorParams,
    system: &LinearSystem,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p_pred = &system.a * p_kk * system.a.transpose() / (1.0 - params.beta)
        + &system.d * &params.q_shape * system.d.transpose() / params.beta;
    let p_pred = (&p_pred + p_pred.transpose()) * 0.5;
    let p_pred_inv = spd_inverse(&p_pred, "predicted shape")?;
    let r_inv = spd_inverse(&params.r_shape, "output shape")?;
    let info = p_pred_inv * (1.0 - params.rho) + system.c.tr_mul(&r_inv) * &system.c * params.rho;
    let p_next = spd_inverse(&info, "information matrix")?;
    let p_next = (&p_next + p_next.transpose()) * 0.5;
    Ok((p_pred, p_next))
}

/// Advance the estimate with the measurement `y_next`.
///
/// The center moves by the gain `rho P_next C' R^-1` on the innovation, and
/// `delta^2` accumulates the innovation quadratic form. A `delta^2` above
/// `1 + 1e-9` means the observed data violates the assumed bounds and is
/// reported as an error rather than clipped.
pub fn measurement_update(
    state: &EstimatorState,
    u: &DVector<f64>,
    y_next: &DVector<f64>,
    params: &EstimatorParams,
    system: &LinearSystem,
) -> Result<EstimatorState> {
    if y_next.len() != system.output_dim() {
        return Err(Error::DimensionMismatch("measurement dimension".into()));
    }
    let (p_pred, p_next) = shape_step(&state.p, params, system)?;
    let x_pred = &system.a * &state.xhat + &system.b * u;
    let innovation = y_next - &system.c * &x_pred;
    let r_inv = spd_inverse(&params.r_shape, "output shape")?;
    let xhat_next = &x_pred + &p_next * system.c.tr_mul(&r_inv) * &innovation * params.rho;
    let weight = &system.c * &p_pred * system.c.transpose() / (1.0 - params.rho)
        + &params.r_shape / params.rho;
    let weight_inv = spd_inverse(&weight, "innovation weight")?;
    let quad = (&weight_inv * &innovation).dot(&innovation);
    let delta_sq = (1.0 - params.beta) * (1.0 - params.rho) * state.delta_sq + quad;
    if delta_sq > 1.0 + 1e-9 {
        return Err(Error::InadmissibleData(format!(
            "delta^2 = {delta_sq} at step {}: disturbances exceed the assumed bounds",
            state.k + 1
        )));
    }
    Ok(EstimatorState {
        xhat: xhat_next,
        p: p_next,
        delta_sq: delta_sq.clamp(0.0, 1.0),
        k: state.k + 1,
    })
}

fn iterate_shape(
    psi: &DMatrix<f64>,
    params: &EstimatorParams,
    system: &LinearSystem,
) -> Result<DMatrix<f64>> {
    let mut p = psi.clone();
    for _ in 0..100_000 {
        let (_, p_next) = shape_step(&p, params, system)?;
        let delta = (&p_next - &p).norm();
        let done = delta <= 1e-10 * p.norm();
        p = p_next;
        if !p.iter().all(|v| v.is_finite()) || p.norm() > 1e14 {
            return Err(Error::NoConvergence("shape recursion diverged".into()));
        }
        if done {
            return Ok(p);
        }
    }
    Err(Error::NoConvergence(
        "shape recursion did not reach a fixed point in 1e5 iterations".into(),
    ))
}

/// Steady-state shape `P_inf`, the fixed point of [`shape_step`].
///
/// Iterated from two different initializations as a cross-check that the
/// limit does not depend on the start.
pub fn steady_state_shape(params: &EstimatorParams, system: &LinearSystem) -> Result<DMatrix<f64>> {
    let n = system.state_dim();
    let p1 = iterate_shape(&DMatrix::identity(n, n), params, system)?;
    let p2 = iterate_shape(&(DMatrix::identity(n, n) * 100.0), params, system)?;
    if (&p1 - &p2).norm() > 1e-8 * p1.norm().max(1.0) {
        return Err(Error::NoConvergence(
            "steady-state shape depends on the initialization".into(),
        ));
    }
    Ok(p1)
}

/// Grid-search `(beta, rho)` minimizing `trace(P_inf)`.
///
/// Coarse grid with the given step over `(0,1)^2` excluding the endpoints,
/// followed by one refinement pass at a tenth of the step around the best
/// cell. Grid points where the recursion diverges are skipped; ties break
/// lexicographically in `(beta, rho)` so the result does not depend on
/// evaluation order.
pub fn tune_params(
    system: &LinearSystem,
    q_shape: &DMatrix<f64>,
    r_shape: &DMatrix<f64>,
    grid_step: f64,
) -> Result<(f64, f64)> {
    if !(0.0 < grid_step && grid_step <= 0.5) {
        return Err(Error::InvalidArgument(format!(
            "grid_step must lie in (0, 0.5], got {grid_step}"
        )));
    }
    let eval = |beta: f64, rho: f64| -> Option<(f64, f64, f64)> {
        let params = EstimatorParams::new(beta, rho, q_shape.clone(), r_shape.clone()).ok()?;
        let p = iterate_shape(&DMatrix::identity(system.state_dim(), system.state_dim()), &params, system).ok()?;
        Some((p.trace(), beta, rho))
    };
    let coarse: Vec<(f64, f64)> = {
        let mut g = Vec::new();
        let mut i = 1;
        loop {
            let v = i as f64 * grid_step;
            if v >= 1.0 - 1e-12 {
                break;
            }
            g.push(v);
            i += 1;
        }
        let mut pts = Vec::with_capacity(g.len() * g.len());
        for &b in &g {
            for &r in &g {
                pts.push((b, r));
            }
        }
        pts
    };
    let best = coarse
        .par_iter()
        .filter_map(|&(b, r)| eval(b, r))
        .min_by(|x, y| x.partial_cmp(y).unwrap());
    let (_, b0, r0) = best.ok_or_else(|| {
        Error::NoConvergence("shape recursion diverged at every grid point".into())
    })?;
    let fine = grid_step / 10.0;
    let mut refined = Vec::new();
    for i in -10i32..=10 {
        for j in -10i32..=10 {
            let b = b0 + i as f64 * fine;
            let r = r0 + j as f64 * fine;
            if b > 0.0 && b < 1.0 && r > 0.0 && r < 1.0 {
                refined.push((b, r));
            }
        }
    }
    let best = refined
        .par_iter()
        .filter_map(|&(b, r)| eval(b, r))
        .min_by(|x, y| x.partial_cmp(y).unwrap())
        .ok_or_else(|| Error::NoConvergence("refinement grid diverged everywhere".into()))?;
    Ok((best.1, best.2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_system() -> LinearSystem {
        // a=0, b=1, c=1, d=1
        LinearSystem::new(
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            None,
        )
        .unwrap()
    }

    fn scalar_params() -> EstimatorParams {
        EstimatorParams::new(
            0.5,
            0.5,
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    fn double_integrator() -> LinearSystem {
        LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            None,
        )
        .unwrap()
    }

    #[test]
    fn shape_step_scalar_oracle() {
        // P_pred = 2, P_next = [0.5/2 + 0.5]^-1 = 4/3
        let sys = scalar_system();
        let params = scalar_params();
        let p = DMatrix::from_element(1, 1, 1.0);
        let (p_pred, p_next) = shape_step(&p, &params, &sys).unwrap();
        assert_relative_eq!(p_pred[(0, 0)], 2.0, max_relative = 1e-14);
        assert_relative_eq!(p_next[(0, 0)], 4.0 / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn shape_step_prediction_dominated_by_dynamics() {
        // with Q = eps I the prediction is essentially (1-beta)^-1 A P A'
        let sys = double_integrator();
        let params = EstimatorParams::new(
            0.5,
            0.5,
            DMatrix::identity(1, 1) * 1e-12,
            DMatrix::identity(1, 1),
        );
        // q_shape must match the disturbance dimension; D = I (2x2) here
        assert!(params.is_err() || params.is_ok());
        let params = EstimatorParams::new(
            0.5,
            0.5,
            DMatrix::identity(2, 2) * 1e-12,
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let p = DMatrix::identity(2, 2);
        let (p_pred, _) = shape_step(&p, &params, &sys).unwrap();
        let expect = &sys.a * &p * sys.a.transpose() * 2.0;
        assert!((p_pred - expect).norm() < 1e-10);
    }

    #[test]
    fn zero_innovation_update() {
        let sys = scalar_system();
        let params = scalar_params();
        let state = EstimatorState {
            xhat: DVector::from_vec(vec![2.0]),
            p: DMatrix::from_element(1, 1, 1.0),
            delta_sq: 0.5,
            k: 0,
        };
        let u = DVector::from_vec(vec![0.3]);
        let x_pred = &sys.a * &state.xhat + &sys.b * &u;
        let y = &sys.c * &x_pred;
        let next = measurement_update(&state, &u, &y, &params, &sys).unwrap();
        assert_relative_eq!(next.xhat[0], x_pred[0], max_relative = 1e-14);
        assert_relative_eq!(next.delta_sq, 0.25 * 0.5, max_relative = 1e-14);
        assert_eq!(next.k, 1);
    }

    #[test]
    fn first_step_delta_is_innovation_quadratic() {
        // delta_0^2 = 0: delta_1^2 = 0.1 * [2/0.5 + 1/0.5]^-1 * 0.1 = 0.01/6
        let sys = scalar_system();
        let params = scalar_params();
        let state = EstimatorState::initial(
            DVector::from_vec(vec![0.0]),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let u = DVector::zeros(1);
        let y = DVector::from_vec(vec![0.1]);
        let next = measurement_update(&state, &u, &y, &params, &sys).unwrap();
        assert_relative_eq!(next.delta_sq, 0.01 / 6.0, max_relative = 1e-13);
    }

    #[test]
    fn inadmissible_innovation_is_an_error() {
        let sys = scalar_system();
        let params = scalar_params();
        let state = EstimatorState::initial(
            DVector::from_vec(vec![0.0]),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let u = DVector::zeros(1);
        let y = DVector::from_vec(vec![10.0]);
        assert!(matches!(
            measurement_update(&state, &u, &y, &params, &sys),
            Err(Error::InadmissibleData(_))
        ));
    }

    #[test]
    fn steady_state_scalar_fixed_point() {
        // a = 0 makes P_pred constant (= 2), so P_inf = 4/3 after one step
        let sys = scalar_system();
        let params = scalar_params();
        let p_inf = steady_state_shape(&params, &sys).unwrap();
        assert_relative_eq!(p_inf[(0, 0)], 4.0 / 3.0, max_relative = 1e-9);
    }

    #[test]
    fn steady_state_init_independent() {
        let sys = double_integrator();
        let params = EstimatorParams::new(
            0.4,
            0.25,
            DMatrix::identity(2, 2) * 0.0625,
            DMatrix::from_element(1, 1, 0.0625),
        )
        .unwrap();
        let p1 = iterate_shape(&DMatrix::identity(2, 2), &params, &sys).unwrap();
        let p2 = iterate_shape(&(DMatrix::identity(2, 2) * 100.0), &params, &sys).unwrap();
        assert!((&p1 - &p2).norm() <= 1e-8 * p1.norm());
    }

    #[test]
    fn tune_is_argmin_and_deterministic() {
        let sys = double_integrator();
        let q = DMatrix::identity(2, 2) * 0.0625;
        let r = DMatrix::from_element(1, 1, 0.0625);
        let (b, rho) = tune_params(&sys, &q, &r, 0.1).unwrap();
        let params = EstimatorParams::new(b, rho, q.clone(), r.clone()).unwrap();
        let t_best = steady_state_shape(&params, &sys).unwrap().trace();
        // no coarse grid point beats the refined optimum
        for i in 1..10 {
            for j in 1..10 {
                let (bb, rr) = (i as f64 * 0.1, j as f64 * 0.1);
                let p = EstimatorParams::new(bb, rr, q.clone(), r.clone()).unwrap();
                if let Ok(pinf) = steady_state_shape(&p, &sys) {
                    assert!(t_best <= pinf.trace() + 1e-12);
                }
            }
        }
        // determinism across reruns
        let again = tune_params(&sys, &q, &r, 0.1).unwrap();
        assert_eq!((b, rho), again);
    }

    #[test]
    fn tune_permutation_invariance() {
        // permuting the state coordinates must not change the optimal trace
        let sys = double_integrator();
        let perm = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let sys_p = LinearSystem::new(
            &perm * &sys.a * &perm,
            &perm * &sys.b,
            &sys.c * &perm,
            None,
        )
        .unwrap();
        let q = DMatrix::identity(2, 2) * 0.01;
        let r = DMatrix::from_element(1, 1, 0.0025);
        let (b1, r1) = tune_params(&sys, &q, &r, 0.1).unwrap();
        let (b2, r2) = tune_params(&sys_p, &q, &r, 0.1).unwrap();
        let p1 = steady_state_shape(
            &EstimatorParams::new(b1, r1, q.clone(), r.clone()).unwrap(),
            &sys,
        )
        .unwrap();
        let p2 = steady_state_shape(
            &EstimatorParams::new(b2, r2, q.clone(), r.clone()).unwrap(),
            &sys_p,
        )
        .unwrap();
        assert_relative_eq!(p1.trace(), p2.trace(), epsilon = 1e-9);
    }
}
