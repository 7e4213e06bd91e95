//! Polytopic constraint-tightening baselines over box over-approximations.
//!
//! Two classical schemes are provided for comparison: the two-set approach
//! bounding the estimation error `e_k` and the prediction error `xi_k`
//! separately, and the single-set approach bounding the stacked error
//! `z_k = (e_k, xi_k)` with one composite recursion. Disturbance sets enter
//! as boxes (their minimum bounding boxes when the original sets are
//! ellipsoids) and all margins are evaluated through support-function
//! recursions; no polytope is ever built explicitly, which keeps the
//! comparison with the ellipsoidal tube numerically like-for-like.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linsys::{spectral_radius, Constraints, LinearSystem};

/// Axis-aligned box `{x : |x_i| <= h_i}` with the exact support
/// `h(c) = Σ_i h_i |c_i|`.
#[derive(Debug, Clone)]
pub struct BoxSet {
    half_widths: DVector<f64>,
}

impl BoxSet {
    pub fn new(half_widths: DVector<f64>) -> Result<Self> {
        if half_widths.iter().any(|&h| h < 0.0 || !h.is_finite()) {
            return Err(Error::InvalidArgument(
                "box half-widths must be finite and nonnegative".into(),
            ));
        }
        Ok(BoxSet { half_widths })
    }

    pub fn zeros(dim: usize) -> Self {
        BoxSet {
            half_widths: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.half_widths.len()
    }

    pub fn half_widths(&self) -> &DVector<f64> {
        &self.half_widths
    }

    pub fn support(&self, direction: &DVector<f64>) -> Result<f64> {
        if direction.len() != self.dim() {
            return Err(Error::DimensionMismatch("box support direction".into()));
        }
        Ok(self
            .half_widths
            .iter()
            .zip(direction.iter())
            .map(|(h, c)| h * c.abs())
            .sum())
    }

    pub fn contains(&self, x: &DVector<f64>, slack: f64) -> bool {
        x.iter()
            .zip(self.half_widths.iter())
            .all(|(v, h)| v.abs() <= h + slack)
    }

    /// Cartesian product, used for the stacked disturbance `W x V`.
    pub fn stack(&self, other: &BoxSet) -> BoxSet {
        let mut h = DVector::zeros(self.dim() + other.dim());
        h.rows_mut(0, self.dim()).copy_from(&self.half_widths);
        h.rows_mut(self.dim(), other.dim())
            .copy_from(&other.half_widths);
        BoxSet { half_widths: h }
    }
}

/// Minkowski sum of transformed boxes, kept as `(M_j, box_j)` terms.
#[derive(Debug, Clone, Default)]
struct BoxSummands {
    terms: Vec<(DMatrix<f64>, BoxSet)>,
}

impl BoxSummands {
    fn new() -> Self {
        BoxSummands { terms: Vec::new() }
    }

    fn push(&mut self, m: DMatrix<f64>, b: BoxSet) {
        debug_assert_eq!(m.ncols(), b.dim());
        self.terms.push((m, b));
    }

    fn left_multiply(&mut self, m: &DMatrix<f64>) {
        for (t, _) in &mut self.terms {
            *t = m * &*t;
        }
    }

    fn support(&self, direction: &DVector<f64>) -> Result<f64> {
        let mut total = 0.0;
        for (m, b) in &self.terms {
            total += b.support(&m.tr_mul(direction))?;
        }
        Ok(total)
    }
}

/// Problem data for both polytopic baselines.
#[derive(Debug, Clone)]
pub struct BaselineProblem {
    a_lc: DMatrix<f64>,
    a_bk: DMatrix<f64>,
    l_gain: DMatrix<f64>,
    c_mat: DMatrix<f64>,
    /// Rows of `F + GK` (directions for the xi / stacked part).
    closed_rows: DMatrix<f64>,
    /// Rows of `F` (directions for the estimation-error part).
    state_rows: DMatrix<f64>,
    w_box: BoxSet,
    v_box: BoxSet,
    e0_box: BoxSet,
}

impl BaselineProblem {
    pub fn new(
        system: &LinearSystem,
        l_gain: DMatrix<f64>,
        k_gain: &DMatrix<f64>,
        w_box: BoxSet,
        v_box: BoxSet,
        e0_box: BoxSet,
        constraints: &Constraints,
    ) -> Result<Self> {
        let n = system.state_dim();
        if l_gain.nrows() != n || l_gain.ncols() != system.output_dim() {
            return Err(Error::DimensionMismatch("observer gain".into()));
        }
        if w_box.dim() != n || v_box.dim() != system.output_dim() || e0_box.dim() != n {
            return Err(Error::DimensionMismatch("baseline box dimensions".into()));
        }
        let a_lc = &system.a + &l_gain * &system.c;
        let a_bk = &system.a + &system.b * k_gain;
        for (name, m) in [("A + LC", &a_lc), ("A + BK", &a_bk)] {
            let rho = spectral_radius(m);
            if rho >= 1.0 {
                return Err(Error::Synthesis(format!(
                    "{name} is not stable (spectral radius {rho})"
                )));
            }
        }
        Ok(BaselineProblem {
            a_lc,
            a_bk,
            l_gain,
            c_mat: system.c.clone(),
            closed_rows: constraints.closed_loop_rows(k_gain),
            state_rows: constraints.f.clone(),
            w_box,
            v_box,
            e0_box,
        })
    }

    fn rows(&self) -> usize {
        self.closed_rows.nrows()
    }

    fn n(&self) -> usize {
        self.a_lc.nrows()
    }

    /// Composite matrices of the stacked error dynamics.
    fn composite(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.n();
        let p = self.v_box.dim();
        let q = self.w_box.dim();
        let lc = &self.l_gain * &self.c_mat;
        let mut a_tilde = DMatrix::zeros(2 * n, 2 * n);
        a_tilde.view_mut((0, 0), (n, n)).copy_from(&self.a_lc);
        a_tilde.view_mut((n, 0), (n, n)).copy_from(&(-&lc));
        a_tilde.view_mut((n, n), (n, n)).copy_from(&self.a_bk);
        let mut b_tilde = DMatrix::zeros(2 * n, q + p);
        b_tilde
            .view_mut((0, 0), (n, q))
            .copy_from(&DMatrix::identity(n, q));
        b_tilde.view_mut((0, q), (n, p)).copy_from(&self.l_gain);
        b_tilde
            .view_mut((n, q), (n, p))
            .copy_from(&(-&self.l_gain));
        (a_tilde, b_tilde)
    }

    fn stacked_direction(&self, row: usize) -> DVector<f64> {
        let n = self.n();
        let mut dir = DVector::zeros(2 * n);
        dir.rows_mut(0, n)
            .copy_from(&self.state_rows.row(row).transpose());
        dir.rows_mut(n, n)
            .copy_from(&self.closed_rows.row(row).transpose());
        dir
    }
}

/// Margins of the two-set scheme for `k = 0..=k_max`:
/// `margin[row][k] = h_{Xi_k}((F+GK)'row) + h_{E_k}(F'row)` with
/// `E_{k+1} = (A+LC) E_k ⊕ W ⊕ L V`, `Xi_{k+1} = (A+BK) Xi_k ⊕ -LC E_k ⊕ -L V`
/// and `Xi_0 = {0}`.
pub fn two_set_tightening(problem: &BaselineProblem, k_max: usize) -> Result<DMatrix<f64>> {
    let d = problem.rows();
    let n = problem.n();
    let mut margins = DMatrix::zeros(d, k_max + 1);
    let mut e_list = BoxSummands::new();
    e_list.push(DMatrix::identity(n, n), problem.e0_box.clone());
    let mut xi_list = BoxSummands::new();
    let minus_lc = -(&problem.l_gain * &problem.c_mat);
    for k in 0..=k_max {
        for row in 0..d {
            let xi_part = xi_list.support(&problem.closed_rows.row(row).transpose())?;
            let e_part = e_list.support(&problem.state_rows.row(row).transpose())?;
            margins[(row, k)] = xi_part + e_part;
        }
        if k < k_max {
            // Phi_k uses E_k before it advances
            xi_list.left_multiply(&problem.a_bk);
            for (m, b) in &e_list.terms {
                xi_list.push(&minus_lc * m, b.clone());
            }
            xi_list.push(-problem.l_gain.clone(), problem.v_box.clone());
            e_list.left_multiply(&problem.a_lc);
            e_list.push(DMatrix::identity(n, n), problem.w_box.clone());
            e_list.push(problem.l_gain.clone(), problem.v_box.clone());
        }
    }
    Ok(margins)
}

/// Margins of the single-set scheme for `k = 0..=k_max`:
/// `margin[row][k] = h_{Z_k}((F'row ; (F+GK)'row))` with
/// `Z_{k+1} = A~ Z_k ⊕ B~ (W x V)` and `Z_0 = E_0 x {0}`.
pub fn single_set_tightening(problem: &BaselineProblem, k_max: usize) -> Result<DMatrix<f64>> {
    let d = problem.rows();
    let n = problem.n();
    let (a_tilde, b_tilde) = problem.composite();
    let dist = problem.w_box.stack(&problem.v_box);
    let mut z_list = BoxSummands::new();
    let mut embed = DMatrix::zeros(2 * n, n);
    embed.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
    z_list.push(embed, problem.e0_box.clone());
    let mut margins = DMatrix::zeros(d, k_max + 1);
    for k in 0..=k_max {
        for row in 0..d {
            margins[(row, k)] = z_list.support(&problem.stacked_direction(row))?;
        }
        if k < k_max {
            z_list.left_multiply(&a_tilde);
            z_list.push(b_tilde.clone(), dist.clone());
        }
    }
    Ok(margins)
}

/// Which baseline recursion to drive to its limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    TwoSet,
    SingleSet,
}

/// Bounding box of the estimation-error minimal RPI set
/// `E_inf = ⊕_j (A+LC)^j (W ⊕ L V)`: axis supports of the limit.
pub fn estimation_mrpi_box(
    system: &LinearSystem,
    l_gain: &DMatrix<f64>,
    w_box: &BoxSet,
    v_box: &BoxSet,
) -> Result<BoxSet> {
    let n = system.state_dim();
    let a_lc = &system.a + l_gain * &system.c;
    if spectral_radius(&a_lc) >= 1.0 {
        return Err(Error::Synthesis("A + LC is not stable".into()));
    }
    let mut half = DVector::<f64>::zeros(n);
    for axis in 0..n {
        let mut dir = DVector::zeros(n);
        dir[axis] = 1.0;
        let mut acc = 0.0;
        let mut settled = 0;
        for _ in 0..100_000 {
            let inc = w_box.support(&dir)? + v_box.support(&(l_gain.tr_mul(&dir)))?;
            acc += inc;
            dir = a_lc.tr_mul(&dir);
            settled = if inc < 1e-14 * (1.0 + acc) { settled + 1 } else { 0 };
            if settled >= 2 {
                break;
            }
        }
        half[axis] = acc;
    }
    BoxSet::new(half)
}

/// Iterate the chosen recursion until every margin row changes by less than
/// `tolerance` between steps and return the limit vector.
///
/// The estimation set is first driven to its own limit so the prediction-error
/// part telescopes; each subsequent step then costs one direction update per
/// constraint row, making the iteration cheap even near the cap.
pub fn steady_state_margins(
    problem: &BaselineProblem,
    kind: BaselineKind,
    tolerance: f64,
) -> Result<DVector<f64>> {
    if !tolerance.is_finite() || tolerance <= 0.0 {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let d = problem.rows();
    let n = problem.n();
    match kind {
        BaselineKind::TwoSet => {
            // E_inf as an explicit summand list
            let mut e_inf = BoxSummands::new();
            {
                let mut frontier = DMatrix::identity(n, n);
                let mut probe_acc = DVector::<f64>::zeros(d);
                let mut settled = 0usize;
                for _ in 0..100_000 {
                    e_inf.push(frontier.clone(), problem.w_box.clone());
                    e_inf.push(&frontier * &problem.l_gain, problem.v_box.clone());
                    frontier = &problem.a_lc * frontier;
                    let mut delta: f64 = 0.0;
                    for row in 0..d {
                        let dir = problem.state_rows.row(row).transpose();
                        let s = e_inf.support(&dir)?;
                        delta = delta.max((s - probe_acc[row]).abs());
                        probe_acc[row] = s;
                    }
                    settled = if delta < tolerance * 1e-3 { settled + 1 } else { 0 };
                    if settled >= 2 {
                        break;
                    }
                }
            }
            let minus_lc_t = (-(&problem.l_gain * &problem.c_mat)).transpose();
            let mut margins = DVector::<f64>::zeros(d);
            let mut acc = DVector::<f64>::zeros(d);
            let mut dirs: Vec<DVector<f64>> = (0..d)
                .map(|row| problem.closed_rows.row(row).transpose())
                .collect();
            let e_parts: Vec<f64> = (0..d)
                .map(|row| e_inf.support(&problem.state_rows.row(row).transpose()))
                .collect::<Result<_>>()?;
            for _ in 0..10_000 {
                let mut delta: f64 = 0.0;
                for row in 0..d {
                    let m = acc[row] + e_parts[row];
                    delta = delta.max((m - margins[row]).abs());
                    margins[row] = m;
                }
                if delta < tolerance {
                    return Ok(margins);
                }
                for row in 0..d {
                    acc[row] += e_inf.support(&(&minus_lc_t * &dirs[row]))?
                        + problem.v_box.support(&(problem.l_gain.tr_mul(&dirs[row])))?;
                    dirs[row] = problem.a_bk.tr_mul(&dirs[row]);
                }
            }
            Err(Error::NoConvergence(
                "two-set margins did not settle within 1e4 steps".into(),
            ))
        }
        BaselineKind::SingleSet => {
            let (a_tilde, b_tilde) = problem.composite();
            let dist = problem.w_box.stack(&problem.v_box);
            let mut margins = DVector::<f64>::zeros(d);
            let mut acc = DVector::<f64>::zeros(d);
            let mut dirs: Vec<DVector<f64>> =
                (0..d).map(|row| problem.stacked_direction(row)).collect();
            for _ in 0..10_000 {
                let mut delta: f64 = 0.0;
                for row in 0..d {
                    // the Z_0 leftover decays geometrically; include it exactly
                    let leftover = problem
                        .e0_box
                        .support(&dirs[row].rows(0, n).into_owned())?;
                    let m = acc[row] + leftover;
                    delta = delta.max((m - margins[row]).abs());
                    margins[row] = m;
                }
                if delta < tolerance {
                    return Ok(margins);
                }
                for row in 0..d {
                    acc[row] += dist.support(&b_tilde.tr_mul(&dirs[row]))?;
                    dirs[row] = a_tilde.tr_mul(&dirs[row]);
                }
            }
            Err(Error::NoConvergence(
                "single-set margins did not settle within 1e4 steps".into(),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn double_integrator() -> LinearSystem {
        LinearSystem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            None,
        )
        .unwrap()
    }

    fn di_constraints() -> Constraints {
        Constraints::new(
            DMatrix::from_row_slice(
                6,
                2,
                &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0],
            ),
            DMatrix::from_row_slice(6, 1, &[0.0, 0.0, 0.0, 0.0, 1.0, -1.0]),
            DVector::from_vec(vec![3.0, 50.0, 3.0, 50.0, 3.0, 3.0]),
        )
        .unwrap()
    }

    fn di_problem(lambda: f64, mu: f64) -> BaselineProblem {
        let system = double_integrator();
        let l_gain = DMatrix::from_row_slice(2, 1, &[-1.0, -1.0]);
        let k_gain = DMatrix::from_row_slice(1, 2, &[-0.6136, -0.9962]);
        let w_box = BoxSet::new(DVector::from_element(2, lambda)).unwrap();
        let v_box = BoxSet::new(DVector::from_element(1, mu)).unwrap();
        let e0_box = estimation_mrpi_box(&system, &l_gain, &w_box, &v_box).unwrap();
        BaselineProblem::new(
            &system,
            l_gain,
            &k_gain,
            w_box,
            v_box,
            e0_box,
            &di_constraints(),
        )
        .unwrap()
    }

    #[test]
    fn initial_margin_is_estimation_part_only() {
        let problem = di_problem(0.25, 0.25);
        let margins = two_set_tightening(&problem, 3).unwrap();
        // k = 0: Xi_0 = {0}, so the u rows (F row = 0) have zero margin
        assert_eq!(margins[(4, 0)], 0.0);
        assert_eq!(margins[(5, 0)], 0.0);
        // state rows see exactly the E_0 box support
        let e_part = problem
            .e0_box
            .support(&problem.state_rows.row(0).transpose())
            .unwrap();
        assert_relative_eq!(margins[(0, 0)], e_part, max_relative = 1e-15);
    }

    #[test]
    fn zero_boxes_give_zero_margins() {
        let system = double_integrator();
        let l_gain = DMatrix::from_row_slice(2, 1, &[-1.0, -1.0]);
        let k_gain = DMatrix::from_row_slice(1, 2, &[-0.6136, -0.9962]);
        let problem = BaselineProblem::new(
            &system,
            l_gain,
            &k_gain,
            BoxSet::zeros(2),
            BoxSet::zeros(1),
            BoxSet::zeros(2),
            &di_constraints(),
        )
        .unwrap();
        assert_eq!(two_set_tightening(&problem, 10).unwrap().amax(), 0.0);
        assert_eq!(single_set_tightening(&problem, 10).unwrap().amax(), 0.0);
        assert_eq!(
            steady_state_margins(&problem, BaselineKind::TwoSet, 1e-9)
                .unwrap()
                .amax(),
            0.0
        );
    }

    #[test]
    fn baselines_identical_at_initial_time() {
        let problem = di_problem(0.25, 0.25);
        let two = two_set_tightening(&problem, 1).unwrap();
        let single = single_set_tightening(&problem, 1).unwrap();
        for row in 0..6 {
            // bit-identical by construction
            assert_eq!(two[(row, 0)], single[(row, 0)]);
        }
    }

    #[test]
    fn single_set_never_more_conservative() {
        let problem = di_problem(0.1, 0.05);
        let two = two_set_tightening(&problem, 25).unwrap();
        let single = single_set_tightening(&problem, 25).unwrap();
        for k in 0..=25 {
            for row in 0..6 {
                assert!(single[(row, k)] <= two[(row, k)] + 1e-9);
            }
        }
    }

    #[test]
    fn margins_monotone_and_convergent() {
        let problem = di_problem(0.25, 0.25);
        let two = two_set_tightening(&problem, 60).unwrap();
        let single = single_set_tightening(&problem, 60).unwrap();
        // the two-set margins grow monotonically; the single-set ones can dip
        // early because the boxed E_0 over-approximates the limit set and the
        // composite recursion first contracts that surplus
        for k in 1..=60 {
            for row in 0..6 {
                assert!(two[(row, k)] >= two[(row, k - 1)] - 1e-12);
            }
        }
        let two_inf = steady_state_margins(&problem, BaselineKind::TwoSet, 1e-9).unwrap();
        let single_inf = steady_state_margins(&problem, BaselineKind::SingleSet, 1e-9).unwrap();
        for row in 0..6 {
            assert!((two[(row, 60)] - two_inf[row]).abs() < 1e-6);
            assert!((single[(row, 60)] - single_inf[row]).abs() < 1e-6);
        }
    }

    #[test]
    fn steady_state_reference_values() {
        // frozen from an independent implementation of the same recursions
        let problem = di_problem(0.25, 0.25);
        let two = steady_state_margins(&problem, BaselineKind::TwoSet, 1e-9).unwrap();
        let single = steady_state_margins(&problem, BaselineKind::SingleSet, 1e-9).unwrap();
        assert_relative_eq!(two[0], 3.351879, max_relative = 1e-4);
        assert_relative_eq!(two[2], 4.5, max_relative = 1e-4);
        assert_relative_eq!(two[4], 3.884528, max_relative = 1e-4);
        assert_relative_eq!(single[0], 1.712344, max_relative = 1e-4);
        assert_relative_eq!(single[2], 2.29395, max_relative = 1e-4);
        assert_relative_eq!(single[4], 3.447136, max_relative = 1e-4);
    }

    #[test]
    fn scalar_geometric_mrpi_box() {
        // a + lc = 0.5 with l = 0, w half-width 1: E_inf support is 2
        let system = LinearSystem::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            None,
        )
        .unwrap();
        let l_gain = DMatrix::zeros(1, 1);
        let w = BoxSet::new(DVector::from_element(1, 1.0)).unwrap();
        let v = BoxSet::zeros(1);
        let e_inf = estimation_mrpi_box(&system, &l_gain, &w, &v).unwrap();
        assert_relative_eq!(e_inf.half_widths()[0], 2.0, max_relative = 1e-9);
        // with zero observer gain the artificial disturbance vanishes and the
        // steady two-set margin for F = 1 is exactly the E_inf support
        let k_gain = DMatrix::from_element(1, 1, -0.25);
        let constraints = Constraints::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.0),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let problem = BaselineProblem::new(
            &system,
            l_gain,
            &k_gain,
            w,
            v,
            e_inf,
            &constraints,
        )
        .unwrap();
        let m = steady_state_margins(&problem, BaselineKind::TwoSet, 1e-9).unwrap();
        assert_relative_eq!(m[0], 2.0, max_relative = 1e-8);
    }

    #[test]
    fn unstable_observer_rejected() {
        let system = double_integrator();
        let l_gain = DMatrix::zeros(2, 1); // A + LC = A is not stable
        let k_gain = DMatrix::from_row_slice(1, 2, &[-0.6136, -0.9962]);
        let r = BaselineProblem::new(
            &system,
            l_gain,
            &k_gain,
            BoxSet::zeros(2),
            BoxSet::zeros(1),
            BoxSet::zeros(2),
            &di_constraints(),
        );
        assert!(matches!(r, Err(Error::Synthesis(_))));
    }
}
