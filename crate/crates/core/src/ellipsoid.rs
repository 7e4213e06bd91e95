//! Ellipsoid representation and support-function algebra.
//!
//! An [`Ellipsoid`] is the set `{x : (x - c)' P^-1 (x - c) <= rho^2}` with a
//! positive-definite shape matrix `P` and a nonnegative radius `rho`. Keeping
//! `P` and `rho` separate lets the estimator rescale a set without touching
//! the (precomputable) shape. All worst-case evaluations go through support
//! functions; Minkowski sums are never constructed explicitly — a
//! [`SummandList`] keeps the terms of `⊕_j M_j E_j` and exploits additivity
//! of the support function instead.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const CONTAINMENT_SLACK: f64 = 1e-9;

/// Ellipsoid `{x : (x - center)' shape^-1 (x - center) <= radius^2}`.
///
/// `radius = 0` denotes the singleton `{center}`.
#[derive(Debug, Clone)]
pub struct Ellipsoid {
    center: DVector<f64>,
    shape: DMatrix<f64>,
    radius: f64,
    /// Lower Cholesky factor of `shape`, cached because every tightening row
    /// triggers many support evaluations.
    chol_l: DMatrix<f64>,
}

impl Ellipsoid {
    /// Build an ellipsoid, validating symmetry, positive definiteness and the radius.
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>, radius: f64) -> Result<Self> {
        let n = center.len();
        if shape.nrows() != n || shape.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "shape is {}x{}, center has length {n}",
                shape.nrows(),
                shape.ncols()
            )));
        }
        if !radius.is_finite() || radius < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "radius must be finite and nonnegative, got {radius}"
            )));
        }
        if center.iter().any(|v| !v.is_finite()) || shape.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "non-finite entry in center or shape".into(),
            ));
        }
        let scale = shape.amax().max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (shape[(i, j)] - shape[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidArgument(format!(
                        "shape not symmetric at ({i},{j}): {} vs {}",
                        shape[(i, j)],
                        shape[(j, i)]
                    )));
                }
            }
        }
        let sym = (&shape + shape.transpose()) * 0.5;
        let chol = nalgebra::Cholesky::new(sym.clone()).ok_or_else(|| {
            Error::InvalidArgument("shape matrix is not positive definite".into())
        })?;
        Ok(Ellipsoid {
            center,
            shape: sym,
            radius,
            chol_l: chol.l(),
        })
    }

    /// Origin-centered ellipsoid with the given shape and radius.
    pub fn centered(shape: DMatrix<f64>, radius: f64) -> Result<Self> {
        let n = shape.nrows();
        Self::new(DVector::zeros(n), shape, radius)
    }

    /// Ball of the given radius: shape is the identity.
    pub fn ball(dim: usize, radius: f64) -> Result<Self> {
        Self::centered(DMatrix::identity(dim, dim), radius)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Same shape, different radius. Used when the membership radius changes
    /// but the (expensive) factorization can be reused.
    pub fn with_radius(&self, radius: f64) -> Result<Self> {
        if !radius.is_finite() || radius < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "radius must be finite and nonnegative, got {radius}"
            )));
        }
        let mut e = self.clone();
        e.radius = radius;
        Ok(e)
    }

    pub fn is_origin_centered(&self) -> bool {
        self.center.iter().all(|&v| v == 0.0)
    }

    /// Support function `h(c) = max_{x in E} c'x = c'center + radius*sqrt(c'Pc)`.
    pub fn support(&self, direction: &DVector<f64>) -> Result<f64> {
        if direction.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "direction has length {}, ellipsoid dimension is {}",
                direction.len(),
                self.dim()
            )));
        }
        if direction.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite direction".into()));
        }
        // c'Pc = ||L'c||^2 with the cached factor.
        let ltc = self.chol_l.tr_mul(direction);
        Ok(self.center.dot(direction) + self.radius * ltc.norm())
    }

    /// Squared Mahalanobis distance of `x` from the center, `(x-c)' P^-1 (x-c)`.
    pub fn gauge_sq(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch("point dimension".into()));
        }
        let d = x - &self.center;
        let y = self
            .chol_l
            .solve_lower_triangular(&d)
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        Ok(y.norm_squared())
    }

    /// Membership test with a small relative slack.
    pub fn contains(&self, x: &DVector<f64>, slack: f64) -> Result<bool> {
        if self.radius == 0.0 {
            return Ok((x - &self.center).amax() <= slack);
        }
        Ok(self.gauge_sq(x)? <= self.radius * self.radius * (1.0 + slack))
    }

    /// Axis-aligned minimum bounding box, as half-widths `rho*sqrt(P_ii)`.
    ///
    /// Only defined for origin-centered ellipsoids: the box baselines assume
    /// symmetric sets.
    pub fn min_bounding_box(&self) -> Result<DVector<f64>> {
        if !self.is_origin_centered() {
            return Err(Error::InvalidArgument(
                "bounding box requires an origin-centered ellipsoid".into(),
            ));
        }
        Ok(DVector::from_fn(self.dim(), |i, _| {
            self.radius * self.shape[(i, i)].max(0.0).sqrt()
        }))
    }

    /// Draw a point uniformly from the ellipsoid volume.
    ///
    /// Direction uniform on the sphere, radial factor `u^(1/n)`, mapped
    /// through the shape factor and scaled by the radius. A radius of zero
    /// returns the center.
    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        if self.radius == 0.0 {
            return self.center.clone();
        }
        let n = self.dim();
        let mut dir = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let nrm = dir.norm();
        if nrm == 0.0 {
            return self.center.clone();
        }
        dir /= nrm;
        let u: f64 = rng.random();
        let z = dir * u.powf(1.0 / n as f64);
        &self.center + &self.chol_l * z * self.radius
    }

    /// Boundary sample: uniform direction, radial factor 1.
    pub fn sample_boundary<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        if self.radius == 0.0 {
            return self.center.clone();
        }
        let n = self.dim();
        let mut dir = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let nrm = dir.norm();
        if nrm == 0.0 {
            return self.center.clone();
        }
        dir /= nrm;
        &self.center + &self.chol_l * dir * self.radius
    }
}

/// Exact containment test for origin-centered ellipsoids.
///
/// `inner ⊆ outer` iff the largest generalized eigenvalue of
/// `(rho_i^2 P_i, rho_o^2 P_o)` is at most one; evaluated as the largest
/// eigenvalue of `L^-1 (rho_i^2 P_i) L^-T` with `L L' = rho_o^2 P_o`, with a
/// relative slack of `1e-9`. Sampling is used only as a test oracle.
pub fn contained_in(inner: &Ellipsoid, outer: &Ellipsoid) -> Result<bool> {
    if !inner.is_origin_centered() || !outer.is_origin_centered() {
        return Err(Error::InvalidArgument(
            "containment test requires origin-centered ellipsoids".into(),
        ));
    }
    if inner.dim() != outer.dim() {
        return Err(Error::DimensionMismatch("ellipsoid dimensions".into()));
    }
    if outer.radius == 0.0 {
        return Ok(inner.radius == 0.0);
    }
    let sigma_inner = &inner.shape * (inner.radius * inner.radius);
    let l_outer = &outer.chol_l * outer.radius;
    // M = L^-1 Sigma_i L^-T
    let t1 = l_outer
        .solve_lower_triangular(&sigma_inner)
        .ok_or_else(|| Error::Numerical("singular outer factor".into()))?;
    let m = l_outer
        .solve_lower_triangular(&t1.transpose())
        .ok_or_else(|| Error::Numerical("singular outer factor".into()))?;
    let sym = (&m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    let lam_max = eig.max();
    Ok(lam_max <= 1.0 + CONTAINMENT_SLACK)
}

/// One term `M_j E_j` of a Minkowski sum of transformed ellipsoids.
#[derive(Debug, Clone)]
pub struct Summand {
    pub transform: DMatrix<f64>,
    pub ellipsoid: Ellipsoid,
}

/// Ordered list of summands representing `⊕_j M_j E_j` through its support
/// function; the sum itself is never constructed.
///
/// All member ellipsoids are origin-centered, so the represented set is
/// centrally symmetric. An empty list is the singleton `{0}`.
#[derive(Debug, Clone, Default)]
pub struct SummandList {
    terms: Vec<Summand>,
}

impl SummandList {
    pub fn new() -> Self {
        SummandList { terms: Vec::new() }
    }

    /// Append a term `M E`. `E` must be origin-centered and `M` must map from
    /// the ellipsoid space into the ambient space of earlier terms.
    pub fn push(&mut self, transform: DMatrix<f64>, ellipsoid: Ellipsoid) -> Result<()> {
        if !ellipsoid.is_origin_centered() {
            return Err(Error::InvalidArgument(
                "summand ellipsoids must be origin-centered".into(),
            ));
        }
        if transform.ncols() != ellipsoid.dim() {
            return Err(Error::DimensionMismatch(format!(
                "transform is {}x{}, ellipsoid dimension is {}",
                transform.nrows(),
                transform.ncols(),
                ellipsoid.dim()
            )));
        }
        if let Some(first) = self.terms.first() {
            if first.transform.nrows() != transform.nrows() {
                return Err(Error::DimensionMismatch(
                    "summand ambient dimensions differ".into(),
                ));
            }
        }
        self.terms.push(Summand {
            transform,
            ellipsoid,
        });
        Ok(())
    }

    /// Left-multiply every summand by `m`: `⊕ M_j E_j  ->  ⊕ (m M_j) E_j`.
    pub fn left_multiply(&mut self, m: &DMatrix<f64>) -> Result<()> {
        for t in &mut self.terms {
            if m.ncols() != t.transform.nrows() {
                return Err(Error::DimensionMismatch(
                    "left factor does not match summand".into(),
                ));
            }
            t.transform = m * &t.transform;
        }
        Ok(())
    }

    /// Support of the Minkowski sum: `h(c) = Σ_j h_{E_j}(M_j' c)`.
    pub fn support(&self, direction: &DVector<f64>) -> Result<f64> {
        let mut total = 0.0;
        for t in &self.terms {
            if t.transform.nrows() != direction.len() {
                return Err(Error::DimensionMismatch(format!(
                    "direction has length {}, summand ambient dimension is {}",
                    direction.len(),
                    t.transform.nrows()
                )));
            }
            total += t.ellipsoid.support(&t.transform.tr_mul(direction))?;
        }
        Ok(total)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Summand] {
        &self.terms
    }

    /// Worst-case realization in a direction: one boundary point per summand.
    /// The maximizer of `c'x` over `M E` is `M * argmax`, with
    /// `argmax = rho^2 P M'c / sqrt((M'c)' P (M'c)) * 1/rho` for each term.
    pub fn support_point(&self, direction: &DVector<f64>) -> Result<DVector<f64>> {
        let dim = self
            .terms
            .first()
            .map(|t| t.transform.nrows())
            .unwrap_or(direction.len());
        let mut x = DVector::zeros(dim);
        for t in &self.terms {
            let c = t.transform.tr_mul(direction);
            let pc = t.ellipsoid.shape() * &c;
            let denom = (c.dot(&pc)).sqrt();
            if denom > 0.0 {
                x += &t.transform * pc * (t.ellipsoid.radius() / denom);
            }
        }
        Ok(x)
    }
}
