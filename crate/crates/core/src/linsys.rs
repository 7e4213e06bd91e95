//! Linear system containers, Riccati/LQR synthesis, quadrotor linearization
//! and zero-order-hold discretization.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Discrete LTI system `x+ = A x + B u + D w`, `y = C x + v`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Disturbance input map. Defaults to the identity: the state disturbance
    /// enters the dynamics directly.
    pub d: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch("A must be square".into()));
        }
        if b.nrows() != n {
            return Err(Error::DimensionMismatch("B row count must match A".into()));
        }
        if c.ncols() != n {
            return Err(Error::DimensionMismatch(
                "C column count must match A".into(),
            ));
        }
        let d = d.unwrap_or_else(|| DMatrix::identity(n, n));
        if d.nrows() != n {
            return Err(Error::DimensionMismatch("D row count must match A".into()));
        }
        Ok(LinearSystem { a, b, c, d })
    }

    /// State dimension n.
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension m.
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Output dimension p.
    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    /// Disturbance dimension q.
    pub fn disturbance_dim(&self) -> usize {
        self.d.ncols()
    }
}

/// Mixed polytopic constraints `F x + G u <= f`.
#[derive(Debug, Clone)]
pub struct Constraints {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub bound: DVector<f64>,
}

impl Constraints {
    pub fn new(f: DMatrix<f64>, g: DMatrix<f64>, bound: DVector<f64>) -> Result<Self> {
        if f.nrows() != g.nrows() || f.nrows() != bound.len() {
            return Err(Error::DimensionMismatch(
                "constraint row counts disagree".into(),
            ));
        }
        Ok(Constraints { f, g, bound })
    }

    pub fn rows(&self) -> usize {
        self.f.nrows()
    }

    /// Rows of `F + G K` as a matrix, the direction generators for the
    /// control-error tightening.
    pub fn closed_loop_rows(&self, k_gain: &DMatrix<f64>) -> DMatrix<f64> {
        &self.f + &self.g * k_gain
    }
}

/// Quadratic cost weights; all symmetric positive definite.
#[derive(Debug, Clone)]
pub struct CostWeights {
    pub state: DMatrix<f64>,
    pub input: DMatrix<f64>,
    pub terminal: DMatrix<f64>,
}

impl CostWeights {
    pub fn new(state: DMatrix<f64>, input: DMatrix<f64>, terminal: DMatrix<f64>) -> Result<Self> {
        for (name, m) in [("state", &state), ("input", &input), ("terminal", &terminal)] {
            if m.nrows() != m.ncols() {
                return Err(Error::DimensionMismatch(format!("{name} weight not square")));
            }
            if nalgebra::Cholesky::new(m.clone()).is_none() {
                return Err(Error::InvalidArgument(format!(
                    "{name} weight is not positive definite"
                )));
            }
        }
        Ok(CostWeights {
            state,
            input,
            terminal,
        })
    }
}

/// Spectral radius via complex eigenvalues (Schur decomposition).
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Solve the discrete algebraic Riccati equation by fixed-point iteration and
/// return the cost-to-go matrix together with the feedback gain for `u = K x`.
///
/// `P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q`, `K = -(R + B'PB)^-1 B'PA`.
/// Converges for stabilizable `(A, B)`; non-convergence within `1e5`
/// iterations is reported as a synthesis error.
pub fn dare_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || r.nrows() != b.ncols() {
        return Err(Error::DimensionMismatch("dare_solve inputs".into()));
    }
    let mut p = q.clone();
    let mut converged = false;
    for _ in 0..100_000 {
        let btp = b.tr_mul(&p);
        let s = r + &btp * b;
        let s_inv_btpa = nalgebra::Cholesky::new(s)
            .ok_or_else(|| Error::Synthesis("R + B'PB not positive definite".into()))?
            .solve(&(&btp * a));
        let p_next = a.tr_mul(&p) * a - a.tr_mul(&p) * b * &s_inv_btpa + q;
        let p_next = (&p_next + p_next.transpose()) * 0.5;
        let delta = (&p_next - &p).norm();
        p = p_next;
        if delta <= 1e-10 * p.norm() {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Synthesis(
            "Riccati iteration did not converge; (A, B) may not be stabilizable".into(),
        ));
    }
    let btp = b.tr_mul(&p);
    let s = r + &btp * b;
    let k = -nalgebra::Cholesky::new(s)
        .ok_or_else(|| Error::Synthesis("R + B'PB not positive definite".into()))?
        .solve(&(&btp * a));
    let rho = spectral_radius(&(a + b * &k));
    if rho >= 1.0 {
        return Err(Error::Synthesis(format!(
            "closed loop not stable, spectral radius {rho}"
        )));
    }
    Ok((p, k))
}

/// Matrix exponential by scaling-and-squaring with a truncated series.
fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.amax() * n as f64;
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = m / 2f64.powi(s as i32);
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..64 {
        term = &term * &scaled / k as f64;
        sum += &term;
        if term.amax() <= 1e-18 * sum.amax() {
            break;
        }
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Exact zero-order-hold discretization of `(A_c, B_c)` at sample time `dt`
/// via the augmented-matrix exponential.
pub fn discretize(
    a_c: &DMatrix<f64>,
    b_c: &DMatrix<f64>,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let n = a_c.nrows();
    let m = b_c.ncols();
    if a_c.ncols() != n || b_c.nrows() != n {
        return Err(Error::DimensionMismatch("discretize inputs".into()));
    }
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a_c * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(b_c * dt));
    let e = expm(&aug);
    Ok((
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    ))
}

/// Quadrotor physical parameters. The inertial values are scenario data; the
/// defaults here are a small-airframe set used by the examples.
#[derive(Debug, Clone, Copy)]
pub struct QuadrotorParams {
    pub mass: f64,
    pub gravity: f64,
    pub inertia: [f64; 3],
    pub dt: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        QuadrotorParams {
            mass: 1.5,
            gravity: 9.81,
            inertia: [0.03, 0.03, 0.05],
            dt: 0.2,
        }
    }
}

impl QuadrotorParams {
    pub fn validate(&self) -> Result<()> {
        if self.mass <= 0.0
            || self.gravity <= 0.0
            || self.inertia.iter().any(|&j| j <= 0.0)
            || self.dt <= 0.0
        {
            return Err(Error::InvalidArgument(
                "quadrotor parameters must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Continuous-time Jacobians of the 12-state quadrotor at hover.
///
/// State order `(p, v, Omega, omega)`, input order `(T, Mx, My, Mz)` with the
/// thrust input measured as a deviation from the hover value `m g`. At zero
/// attitude the 3-2-1 Euler-rate map is the identity and the gyroscopic terms
/// vanish, so the linear model has no trigonometric content.
pub fn linearize_quadrotor(params: &QuadrotorParams) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    params.validate()?;
    let g = params.gravity;
    let mut a = DMatrix::zeros(12, 12);
    let mut b = DMatrix::zeros(12, 4);
    for i in 0..3 {
        a[(i, 3 + i)] = 1.0; // dp/dt = v
        a[(6 + i, 9 + i)] = 1.0; // dOmega/dt = omega at hover
    }
    // thrust tilt: d(vdot)/d(Omega) for mg e3 - T R e3
    a[(3, 7)] = -g;
    a[(4, 6)] = g;
    b[(5, 0)] = -1.0 / params.mass;
    for i in 0..3 {
        b[(9 + i, 1 + i)] = 1.0 / params.inertia[i];
    }
    Ok((a, b))
}

/// Nonlinear quadrotor right-hand side with absolute inputs `(T, Mx, My, Mz)`.
///
/// Used to pin the linearization by finite differences; the closed-loop
/// simulator always runs the linear model.
pub fn quadrotor_rhs(params: &QuadrotorParams, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let (phi, theta, psi) = (x[6], x[7], x[8]);
    let (cphi, sphi) = (phi.cos(), phi.sin());
    let (cth, sth) = (theta.cos(), theta.sin());
    let (cpsi, spsi) = (psi.cos(), psi.sin());
    // third column of R = Rz(psi) Ry(theta) Rx(phi)
    let r_e3 = DVector::from_vec(vec![
        cpsi * sth * cphi + spsi * sphi,
        spsi * sth * cphi - cpsi * sphi,
        cth * cphi,
    ]);
    let omega = DVector::from_vec(vec![x[9], x[10], x[11]]);
    // 3-2-1 Euler kinematics
    let tth = sth / cth;
    let omega_euler = DVector::from_vec(vec![
        omega[0] + sphi * tth * omega[1] + cphi * tth * omega[2],
        cphi * omega[1] - sphi * omega[2],
        sphi / cth * omega[1] + cphi / cth * omega[2],
    ]);
    let j = &params.inertia;
    let jw = DVector::from_vec(vec![j[0] * omega[0], j[1] * omega[1], j[2] * omega[2]]);
    let cross = DVector::from_vec(vec![
        omega[1] * jw[2] - omega[2] * jw[1],
        omega[2] * jw[0] - omega[0] * jw[2],
        omega[0] * jw[1] - omega[1] * jw[0],
    ]);
    let mut dx = DVector::zeros(12);
    for i in 0..3 {
        dx[i] = x[3 + i];
        dx[3 + i] = -u[0] / params.mass * r_e3[i];
        dx[6 + i] = omega_euler[i];
        dx[9 + i] = (u[1 + i] - cross[i]) / j[i];
    }
    dx[5] += params.gravity;
    dx
}
