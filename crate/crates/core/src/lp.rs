//! Small dense linear programming: linear maximization over a polytope and a
//! Farkas-certificate feasibility test.
//!
//! Both entry points reduce to a standard-form LP `min c'y s.t. A y = b,
//! y >= 0` solved by a two-phase simplex with Bland's rule. The duals here
//! have as many equality rows as the state dimension, so the basis stays
//! small even when the polytope has hundreds of rows.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LpOutcome {
    Optimal(f64),
    Unbounded,
}

enum SimplexStatus {
    Optimal(f64),
    Unbounded,
}

/// Primal simplex on `min c'y : A y = b, y >= 0` from a given basic feasible
/// basis. Bland's rule on both the entering and the leaving choice prevents
/// cycling.
fn simplex(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    cost: &DVector<f64>,
    basis: &mut [usize],
    blocked: &[bool],
) -> Result<SimplexStatus> {
    let nr = a.nrows();
    let red_tol = 1e-9 * (1.0 + cost.amax());
    for _ in 0..200_000 {
        let b_mat = DMatrix::from_fn(nr, nr, |i, j| a[(i, basis[j])]);
        let lu = b_mat.clone().lu();
        let xb = lu
            .solve(b)
            .ok_or_else(|| Error::Numerical("singular simplex basis".into()))?;
        let cost_b = DVector::from_fn(nr, |i, _| cost[basis[i]]);
        let lam = b_mat
            .transpose()
            .lu()
            .solve(&cost_b)
            .ok_or_else(|| Error::Numerical("singular simplex basis".into()))?;
        let mut enter = None;
        for j in 0..a.ncols() {
            if blocked[j] || basis.contains(&j) {
                continue;
            }
            let reduced = cost[j] - a.column(j).dot(&lam);
            if reduced < -red_tol {
                enter = Some(j);
                break;
            }
        }
        let enter = match enter {
            Some(j) => j,
            None => return Ok(SimplexStatus::Optimal(cost_b.dot(&xb))),
        };
        let dir = lu
            .solve(&a.column(enter).into_owned())
            .ok_or_else(|| Error::Numerical("singular simplex basis".into()))?;
        let mut best: Option<(f64, usize)> = None;
        for i in 0..nr {
            if dir[i] > 1e-11 {
                let ratio = (xb[i].max(0.0)) / dir[i];
                match best {
                    None => best = Some((ratio, i)),
                    Some((r, bi)) => {
                        if ratio < r - 1e-12
                            || (ratio < r + 1e-12 && basis[i] < basis[bi])
                        {
                            best = Some((ratio, i));
                        }
                    }
                }
            }
        }
        match best {
            None => return Ok(SimplexStatus::Unbounded),
            Some((_, row)) => basis[row] = enter,
        }
    }
    Err(Error::NoConvergence("simplex iteration cap reached".into()))
}

/// Solve `min cost'y : A y = b, y >= 0` from scratch (two phases).
/// Returns `None` when the constraints are infeasible.
fn solve_standard(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    cost: &DVector<f64>,
) -> Result<Option<LpOutcome>> {
    let nr = a.nrows();
    let nc = a.ncols();
    // phase 1: flip signs to make b nonnegative, add artificials
    let mut a1 = DMatrix::zeros(nr, nc + nr);
    let mut b1 = b.clone();
    for i in 0..nr {
        let s = if b[i] < 0.0 { -1.0 } else { 1.0 };
        b1[i] = b[i] * s;
        for j in 0..nc {
            a1[(i, j)] = a[(i, j)] * s;
        }
        a1[(i, nc + i)] = 1.0;
    }
    let cost1 = DVector::from_fn(nc + nr, |j, _| if j < nc { 0.0 } else { 1.0 });
    let mut basis: Vec<usize> = (nc..nc + nr).collect();
    let blocked1 = vec![false; nc + nr];
    let status = simplex(&a1, &b1, &cost1, &mut basis, &blocked1)?;
    let phase1 = match status {
        SimplexStatus::Optimal(v) => v,
        SimplexStatus::Unbounded => {
            return Err(Error::Numerical("phase-1 LP unbounded".into()));
        }
    };
    if phase1 > 1e-8 * (1.0 + b.amax()) {
        return Ok(None);
    }
    // drive remaining artificials out of the basis; rows where no original
    // column can pivot are redundant and get dropped
    let mut keep_rows: Vec<usize> = (0..nr).collect();
    let mut changed = true;
    while changed {
        changed = false;
        let rows = keep_rows.len();
        let b_mat = DMatrix::from_fn(rows, rows, |i, j| a1[(keep_rows[i], basis[j])]);
        let lu = b_mat.lu();
        let mut drop: Option<usize> = None;
        for (r, &bi) in basis.clone().iter().enumerate() {
            if bi < nc {
                continue;
            }
            let mut pivoted = false;
            for j in 0..nc {
                if basis.contains(&j) {
                    continue;
                }
                let col = DVector::from_fn(rows, |i, _| a1[(keep_rows[i], j)]);
                if let Some(d) = lu.solve(&col) {
                    if d[r].abs() > 1e-7 {
                        basis[r] = j;
                        pivoted = true;
                        changed = true;
                        break;
                    }
                }
            }
            if !pivoted {
                drop = Some(r);
                break;
            }
        }
        if let Some(r) = drop {
            keep_rows.remove(r);
            basis.remove(r);
            changed = true;
        }
        if changed {
            continue;
        }
    }
    if keep_rows.len() < nr {
        let rows = keep_rows.len();
        let a_red = DMatrix::from_fn(rows, nc + nr, |i, j| a1[(keep_rows[i], j)]);
        let b_red = DVector::from_fn(rows, |i, _| b1[keep_rows[i]]);
        let mut cost2 = DVector::zeros(nc + nr);
        cost2.rows_mut(0, nc).copy_from(cost);
        let mut blocked2 = vec![false; nc + nr];
        for f in blocked2.iter_mut().skip(nc) {
            *f = true;
        }
        return match simplex(&a_red, &b_red, &cost2, &mut basis, &blocked2)? {
            SimplexStatus::Optimal(v) => Ok(Some(LpOutcome::Optimal(v))),
            SimplexStatus::Unbounded => Ok(Some(LpOutcome::Unbounded)),
        };
    }
    let mut cost2 = DVector::zeros(nc + nr);
    cost2.rows_mut(0, nc).copy_from(cost);
    let mut blocked2 = vec![false; nc + nr];
    for f in blocked2.iter_mut().skip(nc) {
        *f = true;
    }
    match simplex(&a1, &b1, &cost2, &mut basis, &blocked2)? {
        SimplexStatus::Optimal(v) => Ok(Some(LpOutcome::Optimal(v))),
        SimplexStatus::Unbounded => Ok(Some(LpOutcome::Unbounded)),
    }
}

/// Maximize `c'x` over `{x : H x <= h}`.
///
/// Solved through the dual `min h'y : H'y = c, y >= 0`; a dual-infeasible
/// outcome certifies an unbounded primal. The polytope must be nonempty (the
/// callers maintain sets containing the origin).
pub fn max_linear(
    h_mat: &DMatrix<f64>,
    h_vec: &DVector<f64>,
    c: &DVector<f64>,
) -> Result<LpOutcome> {
    if h_mat.nrows() != h_vec.len() || h_mat.ncols() != c.len() {
        return Err(Error::DimensionMismatch("max_linear inputs".into()));
    }
    let a = h_mat.transpose();
    match solve_standard(&a, c, h_vec)? {
        None => Ok(LpOutcome::Unbounded),
        Some(LpOutcome::Optimal(v)) => Ok(LpOutcome::Optimal(v)),
        Some(LpOutcome::Unbounded) => {
            // dual unbounded below means the primal is infeasible
            Err(Error::Numerical("polytope is empty in max_linear".into()))
        }
    }
}

/// Farkas feasibility test for `{x : G x <= h}`.
///
/// The set is empty iff some `y >= 0` with `G'y = 0` has `h'y < 0`; the
/// normalized certificate search `min h'y : G'y = 0, 1'y = 1, y >= 0` is a
/// bounded LP, so the answer is always conclusive.
pub fn polytope_feasible(g: &DMatrix<f64>, h: &DVector<f64>) -> Result<bool> {
    if g.nrows() != h.len() {
        return Err(Error::DimensionMismatch("polytope_feasible inputs".into()));
    }
    let n = g.ncols();
    let m = g.nrows();
    if m == 0 {
        return Ok(true);
    }
    let mut a = DMatrix::zeros(n + 1, m);
    a.view_mut((0, 0), (n, m)).copy_from(&g.transpose());
    for j in 0..m {
        a[(n, j)] = 1.0;
    }
    let mut b = DVector::zeros(n + 1);
    b[n] = 1.0;
    match solve_standard(&a, &b, h)? {
        None => Ok(true), // no normalized null vector at all
        Some(LpOutcome::Optimal(v)) => Ok(v >= -1e-9 * (1.0 + h.amax())),
        Some(LpOutcome::Unbounded) => Err(Error::Numerical(
            "normalized Farkas LP cannot be unbounded".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn box_maximization() {
        // unit box, maximize x + 2y -> 3 at corner (1, 1)
        let h_mat = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let h = DVector::from_element(4, 1.0);
        let c = DVector::from_vec(vec![1.0, 2.0]);
        match max_linear(&h_mat, &h, &c).unwrap() {
            LpOutcome::Optimal(v) => assert_relative_eq!(v, 3.0, max_relative = 1e-10),
            _ => panic!("expected optimal"),
        }
    }

    #[test]
    fn unbounded_direction_detected() {
        // half-plane x <= 1: maximizing y is unbounded
        let h_mat = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let h = DVector::from_element(1, 1.0);
        let c = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(max_linear(&h_mat, &h, &c).unwrap(), LpOutcome::Unbounded);
    }

    #[test]
    fn zero_objective_is_zero() {
        let h_mat = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let h = DVector::from_element(1, 1.0);
        let c = DVector::zeros(2);
        match max_linear(&h_mat, &h, &c).unwrap() {
            LpOutcome::Optimal(v) => assert!(v.abs() <= 1e-12),
            _ => panic!("expected optimal"),
        }
    }

    #[test]
    fn simplex_matches_vertex_enumeration() {
        // random bounded polytopes around the origin: compare against a brute
        // force over all 2x2 row-pair intersections
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let m = 6 + rng.random_range(0..6);
            let mut rows = Vec::new();
            let mut rhs = Vec::new();
            // containment of the origin with h in [0.2, 2]
            for _ in 0..m {
                let a: f64 = rng.random_range(-1.0..1.0);
                let b: f64 = rng.random_range(-1.0..1.0);
                if a.abs() + b.abs() < 0.1 {
                    continue;
                }
                rows.push([a, b]);
                rhs.push(rng.random_range(0.2..2.0));
            }
            // ensure boundedness with a big box
            for (a, b, h) in [
                (1.0, 0.0, 10.0),
                (-1.0, 0.0, 10.0),
                (0.0, 1.0, 10.0),
                (0.0, -1.0, 10.0),
            ] {
                rows.push([a, b]);
                rhs.push(h);
            }
            let mm = rows.len();
            let h_mat = DMatrix::from_fn(mm, 2, |i, j| rows[i][j]);
            let h = DVector::from_fn(mm, |i, _| rhs[i]);
            let c = DVector::from_vec(vec![
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
            // brute force: evaluate c'x at every feasible pairwise intersection
            let mut best = f64::NEG_INFINITY;
            for i in 0..mm {
                for j in (i + 1)..mm {
                    let det = rows[i][0] * rows[j][1] - rows[i][1] * rows[j][0];
                    if det.abs() < 1e-9 {
                        continue;
                    }
                    let x = (rhs[i] * rows[j][1] - rows[i][1] * rhs[j]) / det;
                    let y = (rows[i][0] * rhs[j] - rhs[i] * rows[j][0]) / det;
                    let feasible = (0..mm)
                        .all(|r| rows[r][0] * x + rows[r][1] * y <= rhs[r] + 1e-7);
                    if feasible {
                        best = best.max(c[0] * x + c[1] * y);
                    }
                }
            }
            match max_linear(&h_mat, &h, &c).unwrap() {
                LpOutcome::Optimal(v) => {
                    assert!((v - best).abs() <= 1e-6 * (1.0 + best.abs()), "{v} vs {best}");
                }
                LpOutcome::Unbounded => panic!("bounded polytope reported unbounded"),
            }
        }
    }

    #[test]
    fn farkas_feasible_and_empty() {
        // x <= 1, -x <= -2 is empty
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let h = DVector::from_vec(vec![1.0, -2.0]);
        assert!(!polytope_feasible(&g, &h).unwrap());
        let h2 = DVector::from_vec(vec![2.0, -1.0]);
        assert!(polytope_feasible(&g, &h2).unwrap());
        // equality-like pair x <= 1, -x <= -1 is feasible (the point x = 1)
        let h3 = DVector::from_vec(vec![1.0, -1.0]);
        assert!(polytope_feasible(&g, &h3).unwrap());
    }
}
