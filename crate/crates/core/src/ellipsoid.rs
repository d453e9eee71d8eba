//! Ellipsoids `E(c, S) = {x | (x-c)ᵀ S⁺ (x-c) ≤ 1, x-c ∈ range(S)}` and
//! H-polytopes `{x | Hx ≤ d}`, with the handful of set operations the tube
//! planner needs.
//!
//! Every function here is pure; shapes produced by arithmetic are passed
//! through [`psd_repair`](crate::linalg::psd_repair).

use serde::{Deserialize, Serialize};

use crate::error::check_dim;
use crate::linalg::{psd_repair, quad_form_row};
use crate::{Error, Matrix, Result, Vector};

/// Trace threshold below which a summand of [`outer_sum`] is treated as a point.
pub const TRACE_EPS: f64 = 1e-12;
/// Slack allowed on the membership quadratic form.
pub const MEMBERSHIP_TOL: f64 = 1e-9;
const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = -1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    center: Vector,
    shape: Matrix,
}

impl Ellipsoid {
    /// Validates symmetry and numerical positive semidefiniteness.
    pub fn new(center: Vector, shape: Matrix) -> Result<Self> {
        let n = center.len();
        check_dim("ellipsoid shape rows", n, shape.nrows())?;
        check_dim("ellipsoid shape cols", n, shape.ncols())?;
        if center.iter().chain(shape.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ellipsoid"));
        }
        for i in 0..n {
            for j in 0..i {
                if (shape[(i, j)] - shape[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(Error::InvalidArgument(
                        "ellipsoid shape is not symmetric".into(),
                    ));
                }
            }
        }
        if n > 0 {
            let min_eig = shape.clone().symmetric_eigen().eigenvalues.min();
            if min_eig < PSD_TOL {
                return Err(Error::InvalidArgument(format!(
                    "ellipsoid shape has eigenvalue {min_eig:e} < 0"
                )));
            }
        }
        Ok(Self { center, shape })
    }

    /// Degenerate ellipsoid `E(c, 0) = {c}`.
    pub fn point(center: Vector) -> Self {
        let n = center.len();
        Self {
            center,
            shape: Matrix::zeros(n, n),
        }
    }

    /// Builds from arithmetic results, repairing the shape instead of rejecting it.
    pub(crate) fn from_repaired(center: Vector, shape: &Matrix) -> Self {
        Self {
            center,
            shape: psd_repair(shape),
        }
    }

    pub fn center(&self) -> &Vector {
        &self.center
    }

    pub fn shape(&self) -> &Matrix {
        &self.shape
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn trace(&self) -> f64 {
        self.shape.trace()
    }

    /// Quadratic form `(x-c)ᵀ S⁺ (x-c)`; `+∞` when `x-c` leaves the range of `S`.
    pub fn quadratic_form(&self, x: &Vector) -> Result<f64> {
        check_dim("ellipsoid membership", self.dim(), x.len())?;
        let diff = x - &self.center;
        if self.dim() == 0 {
            return Ok(0.0);
        }
        let eig = self.shape.clone().symmetric_eigen();
        let scale = eig.eigenvalues.amax().max(1.0);
        let cutoff = 1e-12 * scale;
        let proj = eig.eigenvectors.transpose() * diff;
        let mut q = 0.0;
        for (lambda, y) in eig.eigenvalues.iter().zip(proj.iter()) {
            if *lambda > cutoff {
                q += y * y / lambda;
            } else if y.abs() > MEMBERSHIP_TOL {
                return Ok(f64::INFINITY);
            }
        }
        Ok(q)
    }

    /// Projection onto a coordinate pair (itself an ellipsoid).
    pub fn project(&self, coords: (usize, usize)) -> Ellipsoid {
        let (a, b) = coords;
        let c = Vector::from_row_slice(&[self.center[a], self.center[b]]);
        let s = Matrix::from_row_slice(
            2,
            2,
            &[
                self.shape[(a, a)],
                self.shape[(a, b)],
                self.shape[(b, a)],
                self.shape[(b, b)],
            ],
        );
        Ellipsoid::from_repaired(c, &s)
    }

    /// `c + L w` for a unit vector `w`, where `S = L Lᵀ` (eigen square root).
    pub fn boundary_map(&self) -> Matrix {
        let n = self.dim();
        if n == 0 {
            return Matrix::zeros(0, 0);
        }
        let eig = self.shape.clone().symmetric_eigen();
        let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        &eig.eigenvectors * Matrix::from_diagonal(&sqrt_vals)
    }
}

/// `{x | Hx ≤ d}`. Emptiness is not checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    h: Matrix,
    d: Vector,
}

impl Polytope {
    pub fn new(h: Matrix, d: Vector) -> Result<Self> {
        check_dim("polytope rows", h.nrows(), d.len())?;
        if h.iter().chain(d.iter()).any(|v| v.is_nan()) {
            return Err(Error::NonFinite("polytope"));
        }
        for (j, row) in h.row_iter().enumerate() {
            if row.iter().all(|v| *v == 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "polytope row {j} is all zeros"
                )));
            }
        }
        Ok(Self { h, d })
    }

    /// Axis-aligned box `low ≤ x ≤ high`, two rows per coordinate (upper then lower).
    pub fn from_box(low: &[f64], high: &[f64]) -> Result<Self> {
        check_dim("box bounds", low.len(), high.len())?;
        let n = low.len();
        let mut h = Matrix::zeros(2 * n, n);
        let mut d = Vector::zeros(2 * n);
        for i in 0..n {
            h[(2 * i, i)] = 1.0;
            d[2 * i] = high[i];
            h[(2 * i + 1, i)] = -1.0;
            d[2 * i + 1] = -low[i];
        }
        Self::new(h, d)
    }

    /// Box constraints on a subset of coordinates of an `n`-dimensional space.
    pub fn from_coordinate_bounds(n: usize, bounds: &[(usize, f64, f64)]) -> Result<Self> {
        let mut h = Matrix::zeros(2 * bounds.len(), n);
        let mut d = Vector::zeros(2 * bounds.len());
        for (r, &(i, lo, hi)) in bounds.iter().enumerate() {
            if i >= n {
                return Err(Error::InvalidArgument(format!("coordinate {i} >= {n}")));
            }
            h[(2 * r, i)] = 1.0;
            d[2 * r] = hi;
            h[(2 * r + 1, i)] = -1.0;
            d[2 * r + 1] = -lo;
        }
        Self::new(h, d)
    }

    pub fn h(&self) -> &Matrix {
        &self.h
    }

    pub fn d(&self) -> &Vector {
        &self.d
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.h.nrows()
    }

    pub fn row(&self, j: usize) -> Vec<f64> {
        self.h.row(j).iter().copied().collect()
    }

    /// Exact membership `Hx ≤ d + tol`.
    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        x.len() == self.dim()
            && (&self.h * x - &self.d)
                .iter()
                .all(|v| *v <= tol)
    }

    /// Largest row residual `max_j (Hx - d)_j`.
    pub fn max_residual(&self, x: &Vector) -> f64 {
        (&self.h * x - &self.d).max()
    }

    /// Bounding box implied by axis-aligned rows, if every coordinate has both
    /// an upper and a lower axis row.
    pub fn axis_box(&self) -> Option<(Vector, Vector)> {
        let n = self.dim();
        let mut low = Vector::from_element(n, f64::NEG_INFINITY);
        let mut high = Vector::from_element(n, f64::INFINITY);
        for j in 0..self.num_rows() {
            let nz: Vec<usize> = (0..n).filter(|&i| self.h[(j, i)] != 0.0).collect();
            if nz.len() != 1 {
                continue;
            }
            let i = nz[0];
            let a = self.h[(j, i)];
            let bound = self.d[j] / a;
            if a > 0.0 {
                high[i] = high[i].min(bound);
            } else {
                low[i] = low[i].max(bound);
            }
        }
        if low.iter().chain(high.iter()).all(|v| v.is_finite()) {
            Some((low, high))
        } else {
            None
        }
    }

    /// True when some pair of rows with opposite normals admits no point.
    /// Exact for boxes; a sufficient emptiness test otherwise.
    pub fn has_opposing_conflict(&self) -> bool {
        let m = self.num_rows();
        for a in 0..m {
            for b in (a + 1)..m {
                let ra = self.h.row(a);
                let rb = self.h.row(b);
                let na = ra.norm();
                let nb = rb.norm();
                if (ra / na + rb / nb).amax() < 1e-12 && self.d[a] / na + self.d[b] / nb < 0.0 {
                    return true;
                }
            }
        }
        false
    }
}

/// `A E(c, S) + b = E(Ac + b, A S Aᵀ)`.
pub fn affine_transform(a: &Matrix, b: &Vector, e: &Ellipsoid) -> Result<Ellipsoid> {
    check_dim("affine transform columns", e.dim(), a.ncols())?;
    check_dim("affine transform offset", a.nrows(), b.len())?;
    let c = a * e.center() + b;
    let s = a * e.shape() * a.transpose();
    Ok(Ellipsoid::from_repaired(c, &s))
}

/// Trace-ratio outer approximation of the Minkowski sum.
///
/// A summand whose trace is at most [`TRACE_EPS`] is a point and the sum is a
/// plain translation of the other summand.
pub fn outer_sum(e1: &Ellipsoid, e2: &Ellipsoid) -> Result<Ellipsoid> {
    check_dim("outer sum", e1.dim(), e2.dim())?;
    let c = e1.center() + e2.center();
    let s = outer_sum_shape(e1.shape(), e2.shape());
    Ok(Ellipsoid::from_repaired(c, &s))
}

/// Shape matrix of [`outer_sum`] without repair.
pub fn outer_sum_shape(s1: &Matrix, s2: &Matrix) -> Matrix {
    let t1 = s1.trace();
    let t2 = s2.trace();
    if t2 <= TRACE_EPS {
        return s1.clone();
    }
    if t1 <= TRACE_EPS {
        return s2.clone();
    }
    let alpha = (t1 / t2).sqrt();
    s1 * (1.0 + 1.0 / alpha) + s2 * (1.0 + alpha)
}

/// Per-row inscription margins `h_jᵀc − d_j + √(h_jᵀ S h_j)`.
/// The ellipsoid lies inside the polytope iff every margin is `≤ 0`.
pub fn inscribed_in_polytope(e: &Ellipsoid, p: &Polytope) -> Result<Vector> {
    check_dim("inscription", p.dim(), e.dim())?;
    let hc = p.h() * e.center();
    Ok(Vector::from_fn(p.num_rows(), |j, _| {
        let h = p.row(j);
        hc[j] - p.d()[j] + quad_form_row(&h, e.shape()).max(0.0).sqrt()
    }))
}

/// Convenience verdict built on [`inscribed_in_polytope`].
pub fn is_inscribed(e: &Ellipsoid, p: &Polytope) -> Result<bool> {
    Ok(inscribed_in_polytope(e, p)?.iter().all(|g| *g <= 0.0))
}

/// Membership with a [`MEMBERSHIP_TOL`] slack on the quadratic form.
pub fn contains_point(e: &Ellipsoid, x: &Vector) -> Result<bool> {
    Ok(e.quadratic_form(x)? <= 1.0 + MEMBERSHIP_TOL)
}

/// `U ⊖ E(0, K S Kᵀ)`: each offset shrinks by the support of the mapped tube
/// cross-section. The result may be empty.
pub fn tighten_action_polytope(u_set: &Polytope, k: &Matrix, s: &Matrix) -> Result<Polytope> {
    check_dim("tightening gain rows", u_set.dim(), k.nrows())?;
    check_dim("tightening shape", k.ncols(), s.nrows())?;
    check_dim("tightening shape", s.nrows(), s.ncols())?;
    let mapped = k * s * k.transpose();
    let d = Vector::from_fn(u_set.num_rows(), |j, _| {
        let h = u_set.row(j);
        u_set.d()[j] - quad_form_row(&h, &mapped).max(0.0).sqrt()
    });
    Ok(Polytope {
        h: u_set.h().clone(),
        d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Vector {
        Vector::from_row_slice(x)
    }

    fn m(r: usize, c: usize, x: &[f64]) -> Matrix {
        Matrix::from_row_slice(r, c, x)
    }

    fn unit_ball(n: usize) -> Ellipsoid {
        Ellipsoid::new(Vector::zeros(n), Matrix::identity(n, n)).unwrap()
    }

    #[test]
    fn affine_identity() {
        let e = affine_transform(&Matrix::identity(2, 2), &Vector::zeros(2), &unit_ball(2)).unwrap();
        assert_eq!(e, unit_ball(2));
    }

    #[test]
    fn affine_scale_and_shift() {
        let e = affine_transform(&(Matrix::identity(2, 2) * 2.0), &v(&[1.0, 0.0]), &unit_ball(2))
            .unwrap();
        assert_eq!(e.center(), &v(&[1.0, 0.0]));
        assert_eq!(e.shape(), &(Matrix::identity(2, 2) * 4.0));
    }

    #[test]
    fn affine_projection_to_sum() {
        let e = affine_transform(&m(1, 2, &[1.0, 1.0]), &Vector::zeros(1), &unit_ball(2)).unwrap();
        assert!((e.shape()[(0, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn affine_dimension_mismatch() {
        assert!(affine_transform(&Matrix::identity(3, 3), &Vector::zeros(3), &unit_ball(2)).is_err());
    }

    #[test]
    fn outer_sum_symmetric() {
        let e = outer_sum(&unit_ball(2), &unit_ball(2)).unwrap();
        assert_eq!(e.shape(), &(Matrix::identity(2, 2) * 4.0));
    }

    #[test]
    fn outer_sum_with_point_is_translation() {
        let s = m(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let e1 = Ellipsoid::new(v(&[1.0, 2.0]), s.clone()).unwrap();
        let e2 = Ellipsoid::point(v(&[0.5, -1.0]));
        let sum = outer_sum(&e1, &e2).unwrap();
        assert_eq!(sum.center(), &v(&[1.5, 1.0]));
        assert_eq!(sum.shape(), &s);
        let sum = outer_sum(&e2, &e1).unwrap();
        assert_eq!(sum.shape(), &s);
    }

    #[test]
    fn outer_sum_degenerate_axes() {
        let e1 = Ellipsoid::new(Vector::zeros(2), m(2, 2, &[4.0, 0.0, 0.0, 0.0])).unwrap();
        let e2 = Ellipsoid::new(Vector::zeros(2), m(2, 2, &[0.0, 0.0, 0.0, 1.0])).unwrap();
        let sum = outer_sum(&e1, &e2).unwrap();
        assert!((sum.shape() - m(2, 2, &[6.0, 0.0, 0.0, 3.0])).amax() < 1e-14);
        // Sampled containment of boundary sums.
        for i in 0..1000 {
            let s1 = if i % 2 == 0 { 2.0 } else { -2.0 };
            let t = i as f64 / 1000.0;
            let s2 = (2.0 * std::f64::consts::PI * t).sin();
            let x = v(&[s1, s2]);
            assert!(contains_point(&sum, &x).unwrap());
        }
    }

    #[test]
    fn margins_box_and_halfspace() {
        let bx = Polytope::from_box(&[-2.0, -2.0], &[2.0, 2.0]).unwrap();
        let g = inscribed_in_polytope(&unit_ball(2), &bx).unwrap();
        assert!(g.iter().all(|x| (x + 1.0).abs() < 1e-15));
        let half = Polytope::new(m(1, 2, &[1.0, 0.0]), v(&[1.0])).unwrap();
        let g = inscribed_in_polytope(&unit_ball(2), &half).unwrap();
        assert_eq!(g[0], 0.0);
        assert!(is_inscribed(&unit_ball(2), &half).unwrap());
    }

    #[test]
    fn margins_shifted_ball_not_inscribed() {
        let e = Ellipsoid::new(v(&[0.5, 0.0]), Matrix::identity(2, 2)).unwrap();
        let bx = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let g = inscribed_in_polytope(&e, &bx).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15);
        assert!(!is_inscribed(&e, &bx).unwrap());
        // Sampled boundary sup exceeds the bound.
        let sup = (0..360)
            .map(|k| 0.5 + (k as f64).to_radians().cos())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(sup > 1.0);
    }

    #[test]
    fn membership_cases() {
        let b = unit_ball(2);
        assert!(contains_point(&b, &v(&[1.0, 0.0])).unwrap());
        assert!(!contains_point(&b, &v(&[1.1, 0.0])).unwrap());
        let p = Ellipsoid::point(v(&[0.3, -0.2]));
        assert!(contains_point(&p, &v(&[0.3, -0.2])).unwrap());
        assert!(!contains_point(&p, &v(&[0.301, -0.2])).unwrap());
        assert!(contains_point(&b, &v(&[1.0])).is_err());
    }

    #[test]
    fn tightening_cases() {
        let u = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
        let t = tighten_action_polytope(&u, &m(1, 2, &[0.5, 0.5]), &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(t.d(), u.d());
        let t = tighten_action_polytope(&u, &m(1, 2, &[0.5, 0.5]), &Matrix::identity(2, 2)).unwrap();
        for j in 0..2 {
            assert!((t.d()[j] - (1.0 - 0.5f64.sqrt())).abs() < 1e-15);
        }
        assert!((t.d()[0] - 0.2929).abs() < 1e-4);
        let t = tighten_action_polytope(&u, &m(1, 2, &[1.0, 0.0]), &m(2, 2, &[4.0, 0.0, 0.0, 0.0]))
            .unwrap();
        assert!((t.d()[0] + 1.0).abs() < 1e-15);
        assert!(t.has_opposing_conflict());
        assert!(!u.has_opposing_conflict());
    }

    #[test]
    fn constructor_validation() {
        assert!(Ellipsoid::new(Vector::zeros(2), m(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
        assert!(Ellipsoid::new(Vector::zeros(2), m(2, 2, &[1.0, 0.0, 0.0, -1.0])).is_err());
        assert!(Polytope::new(m(2, 2, &[1.0, 0.0, 0.0, 0.0]), v(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn axis_box_recovers_bounds() {
        let p = Polytope::from_box(&[-1.0, 0.0], &[2.0, 3.0]).unwrap();
        let (lo, hi) = p.axis_box().unwrap();
        assert_eq!(lo, v(&[-1.0, 0.0]));
        assert_eq!(hi, v(&[2.0, 3.0]));
    }
}
