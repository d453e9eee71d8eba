//! Ellipsoidal tubes: linearised closed-loop propagation of one model, the
//! bundle of one tube per ensemble member, and capture audits against
//! realised trajectories.

use std::f64::consts::TAU;

use crate::dynamics::ProbabilisticDynamics;
use crate::ellipsoid::{contains_point, outer_sum_shape, Ellipsoid};
use crate::error::check_dim;
use crate::linalg::psd_repair;
use crate::safe_set::{convex_hull_2d, hull_contains, Point2};
use crate::{Error, Matrix, Result, Vector};

/// Boundary samples per ellipsoid in the hull-based capture test.
pub const HULL_SAMPLES: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Tube {
    pub ellipsoids: Vec<Ellipsoid>,
    pub actions: Vec<Vector>,
    pub feedback: Matrix,
}

impl Tube {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// Nominal state `z_k`, the centre of `E_k`.
    pub fn state(&self, k: usize) -> &Vector {
        self.ellipsoids[k].center()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TubeBundle {
    pub tubes: Vec<Tube>,
}

impl TubeBundle {
    pub fn horizon(&self) -> usize {
        self.tubes[0].horizon()
    }

    pub fn len(&self) -> usize {
        self.tubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tubes.is_empty()
    }

    /// `E_k` of every member.
    pub fn stage(&self, k: usize) -> impl Iterator<Item = &Ellipsoid> {
        self.tubes.iter().map(move |t| &t.ellipsoids[k])
    }
}

fn finite(v: &Vector, s: &Matrix) -> Result<()> {
    if v.iter().chain(s.iter()).all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("tube propagation"))
    }
}

/// `E(m(z, v), F S Fᵀ) ⊕ E(0, diag var(z, v))` with `F = A + B K`.
pub fn propagate_one<M: ProbabilisticDynamics + ?Sized>(
    model: &M,
    e: &Ellipsoid,
    v: &Vector,
    k: &Matrix,
) -> Result<Ellipsoid> {
    check_dim("feedback rows", model.action_dim(), k.nrows())?;
    check_dim("feedback cols", model.state_dim(), k.ncols())?;
    let lin = model.linearize(e.center(), v)?;
    let f = &lin.a + &lin.b * k;
    let mapped = &f * e.shape() * f.transpose();
    let shape = outer_sum_shape(&mapped, &Matrix::from_diagonal(&lin.var));
    finite(&lin.mean, &shape)?;
    Ok(Ellipsoid::from_repaired(lin.mean, &psd_repair(&shape)))
}

/// Tube of one model starting at `E(x_t, 0)`.
pub fn rollout_tube<M: ProbabilisticDynamics + ?Sized>(
    model: &M,
    x_t: &Vector,
    actions: &[Vector],
    k: &Matrix,
) -> Result<Tube> {
    if actions.is_empty() {
        return Err(Error::InvalidArgument("tube horizon must be at least 1".into()));
    }
    check_dim("tube initial state", model.state_dim(), x_t.len())?;
    let mut ellipsoids = Vec::with_capacity(actions.len() + 1);
    ellipsoids.push(Ellipsoid::point(x_t.clone()));
    for v in actions {
        let next = propagate_one(model, ellipsoids.last().unwrap(), v, k)?;
        ellipsoids.push(next);
    }
    Ok(Tube {
        ellipsoids,
        actions: actions.to_vec(),
        feedback: k.clone(),
    })
}

/// One tube per member, all sharing the action sequence and feedback.
pub fn rollout_bundle<M: ProbabilisticDynamics>(
    members: &[M],
    x_t: &Vector,
    actions: &[Vector],
    k: &Matrix,
) -> Result<TubeBundle> {
    if members.is_empty() {
        return Err(Error::EmptyInput);
    }
    let tubes = members
        .iter()
        .map(|m| rollout_tube(m, x_t, actions, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(TubeBundle { tubes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepCapture {
    /// Inside at least one member's ellipsoid.
    pub in_ellipsoid: bool,
    /// Inside the planar hull of the sampled ellipsoid boundaries.
    pub in_hull: bool,
}

impl StepCapture {
    pub fn captured(&self) -> bool {
        self.in_ellipsoid || self.in_hull
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureReport {
    pub steps: Vec<StepCapture>,
}

impl CaptureReport {
    pub fn all_captured(&self) -> bool {
        self.steps.iter().all(StepCapture::captured)
    }
}

fn planar_samples(e: &Ellipsoid, coords: (usize, usize), out: &mut Vec<Point2>) {
    let p = e.project(coords);
    let l = p.boundary_map();
    let c = p.center();
    out.push([c[0], c[1]]);
    for i in 0..HULL_SAMPLES {
        let th = TAU * i as f64 / HULL_SAMPLES as f64;
        let (s, co) = th.sin_cos();
        out.push([
            c[0] + l[(0, 0)] * co + l[(0, 1)] * s,
            c[1] + l[(1, 0)] * co + l[(1, 1)] * s,
        ]);
    }
}

/// Stage-wise capture of a realised trajectory `x_t, …, x_{t+N}` (a prefix
/// is accepted when the episode ended early).
pub fn captures(bundle: &TubeBundle, actual: &[Vector], coords: (usize, usize)) -> Result<CaptureReport> {
    if bundle.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = bundle.horizon() + 1;
    if actual.is_empty() || actual.len() > n {
        return Err(Error::DimensionMismatch {
            context: "capture trajectory length",
            expected: n,
            got: actual.len(),
        });
    }
    let mut steps = Vec::with_capacity(actual.len());
    for (k, x) in actual.iter().enumerate() {
        let mut in_ellipsoid = false;
        for e in bundle.stage(k) {
            if contains_point(e, x)? {
                in_ellipsoid = true;
                break;
            }
        }
        let in_hull = if in_ellipsoid {
            true
        } else {
            let mut pts = Vec::with_capacity(bundle.len() * (HULL_SAMPLES + 1));
            for e in bundle.stage(k) {
                planar_samples(e, coords, &mut pts);
            }
            let hull = convex_hull_2d(&pts)?;
            hull_contains(&hull, [x[coords.0], x[coords.1]], 1e-12)
        };
        steps.push(StepCapture {
            in_ellipsoid,
            in_hull,
        });
    }
    Ok(CaptureReport { steps })
}
