//! Safe-set estimates: planar convex hulls of feasibly certified states,
//! their H-representations, and the delayed terminal-set history.

use serde::{Deserialize, Serialize};

use crate::data::TransitionDataset;
use crate::ellipsoid::Polytope;
use crate::{Error, Matrix, Result, Vector};

pub type Point2 = [f64; 2];

/// Half-width of the box used when a hull has no interior.
pub const DEGENERATE_INFLATION: f64 = 1e-3;

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Monotone-chain convex hull, counter-clockwise, without collinear boundary
/// points. One distinct point yields one vertex; a collinear set yields its
/// two extremes.
pub fn convex_hull_2d(points: &[Point2]) -> Result<Vec<Point2>> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("hull input"));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return Ok(pts);
    }
    let mut lower: Vec<Point2> = Vec::with_capacity(pts.len());
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point2> = Vec::with_capacity(pts.len());
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    Ok(lower)
}

/// Shoelace area of a counter-clockwise polygon (0 for degenerate hulls).
pub fn polygon_area(vertices: &[Point2]) -> f64 {
    if vertices.len() < 3 {
        return 0.0;
    }
    let n = vertices.len();
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (vertices[i], vertices[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
}

/// Membership of `p` in the hull spanned by `vertices`, with slack `tol`.
pub fn hull_contains(vertices: &[Point2], p: Point2, tol: f64) -> bool {
    match vertices.len() {
        0 => false,
        1 => (p[0] - vertices[0][0]).hypot(p[1] - vertices[0][1]) <= tol,
        2 => {
            let (a, b) = (vertices[0], vertices[1]);
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            let off = cross(a, b, p).abs() / len;
            let t = ((p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1])) / (len * len);
            off <= tol && (-tol / len..=1.0 + tol / len).contains(&t)
        }
        n => (0..n).all(|i| {
            let (a, b) = (vertices[i], vertices[(i + 1) % n]);
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            cross(a, b, p) / len >= -tol
        }),
    }
}

fn lift(h: Point2, coords: (usize, usize), n_x: usize) -> Vec<f64> {
    let mut row = vec![0.0; n_x];
    row[coords.0] = h[0];
    row[coords.1] = h[1];
    row
}

/// One unit-normal row per hull edge acting on `coords` of an `n_x`-state.
/// Hulls without interior become a box of half-width
/// [`DEGENERATE_INFLATION`] around their bounding box.
pub fn hull_to_polytope(vertices: &[Point2], coords: (usize, usize), n_x: usize) -> Result<Polytope> {
    if vertices.is_empty() {
        return Err(Error::EmptyInput);
    }
    if coords.0 >= n_x || coords.1 >= n_x || coords.0 == coords.1 {
        return Err(Error::InvalidArgument(format!(
            "invalid coordinate pair {coords:?} for dimension {n_x}"
        )));
    }
    let mut rows: Vec<(Point2, f64)> = Vec::new();
    if vertices.len() >= 3 && polygon_area(vertices) > 0.0 {
        let n = vertices.len();
        for i in 0..n {
            let (a, b) = (vertices[i], vertices[(i + 1) % n]);
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let len = ex.hypot(ey);
            let h = [ey / len, -ex / len];
            rows.push((h, h[0] * a[0] + h[1] * a[1]));
        }
    } else {
        let lo = |k: usize| vertices.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min);
        let hi = |k: usize| vertices.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max);
        let e = DEGENERATE_INFLATION;
        rows.push(([1.0, 0.0], hi(0) + e));
        rows.push(([-1.0, 0.0], -(lo(0) - e)));
        rows.push(([0.0, 1.0], hi(1) + e));
        rows.push(([0.0, -1.0], -(lo(1) - e)));
    }
    let mut h = Matrix::zeros(rows.len(), n_x);
    for (j, (r, _)) in rows.iter().enumerate() {
        h.row_mut(j).copy_from_slice(&lift(*r, coords, n_x));
    }
    let d = Vector::from_iterator(rows.len(), rows.iter().map(|(_, d)| *d));
    Polytope::new(h, d)
}

/// Hull of feasible states in the constrained plane at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeSetEstimate {
    pub epoch: usize,
    pub coords: (usize, usize),
    /// Counter-clockwise hull vertices in the constrained plane.
    pub vertices: Vec<Point2>,
    pub polytope: Polytope,
}

impl SafeSetEstimate {
    /// Hull of `points` (full states), intersected with the rows of
    /// `state_polytope` that act only on `coords`.
    pub fn from_states<'a>(
        states: impl IntoIterator<Item = &'a [f64]>,
        epoch: usize,
        coords: (usize, usize),
        state_polytope: &Polytope,
    ) -> Result<Self> {
        let n_x = state_polytope.dim();
        let pts: Vec<Point2> = states.into_iter().map(|x| [x[coords.0], x[coords.1]]).collect();
        if pts.is_empty() {
            return Err(Error::NoFeasibleStates);
        }
        let vertices = convex_hull_2d(&pts)?;
        let hull = hull_to_polytope(&vertices, coords, n_x)?;
        let mut rows: Vec<Vec<f64>> = (0..hull.num_rows()).map(|j| hull.row(j)).collect();
        let mut d: Vec<f64> = hull.d().iter().copied().collect();
        for j in 0..state_polytope.num_rows() {
            let row = state_polytope.row(j);
            let planar = row
                .iter()
                .enumerate()
                .all(|(i, v)| *v == 0.0 || i == coords.0 || i == coords.1);
            if planar {
                rows.push(row);
                d.push(state_polytope.d()[j]);
            }
        }
        let h = Matrix::from_fn(rows.len(), n_x, |i, j| rows[i][j]);
        Ok(Self {
            epoch,
            coords,
            vertices,
            polytope: Polytope::new(h, Vector::from_vec(d))?,
        })
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.vertices)
    }

    /// Row-wise containment check of a planar point.
    pub fn contains_planar(&self, p: Point2, tol: f64) -> bool {
        let mut x = Vector::zeros(self.polytope.dim());
        x[self.coords.0] = p[0];
        x[self.coords.1] = p[1];
        self.polytope.contains(&x, tol)
    }
}

/// Hull of the feasible-flagged states of `dataset`.
pub fn estimate_safe_set(
    dataset: &TransitionDataset,
    epoch: usize,
    coords: (usize, usize),
    state_polytope: &Polytope,
) -> Result<SafeSetEstimate> {
    SafeSetEstimate::from_states(dataset.feasible_states(), epoch, coords, state_polytope)
}

/// Per-epoch estimate history; the terminal set at epoch `j` is entry
/// `max(0, j − δ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalSetSelector {
    delay: usize,
    history: Vec<SafeSetEstimate>,
}

/// Serialised form of one history entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeSetRecord {
    pub epoch: usize,
    pub area: f64,
    pub vertices: Vec<Point2>,
    #[serde(rename = "H")]
    pub h: Vec<Vec<f64>>,
    pub d: Vec<f64>,
}

impl TerminalSetSelector {
    /// `initial` is the epoch-0 estimate built from the initial states.
    pub fn new(initial: SafeSetEstimate, delay: usize) -> Self {
        Self {
            delay,
            history: vec![initial],
        }
    }

    pub fn delay(&self) -> usize {
        self.delay
    }

    pub fn history(&self) -> &[SafeSetEstimate] {
        &self.history
    }

    /// Appends the estimate for the next epoch.
    pub fn push(&mut self, estimate: SafeSetEstimate) {
        self.history.push(estimate);
    }

    pub fn select(&self, epoch: usize) -> &SafeSetEstimate {
        let idx = epoch.saturating_sub(self.delay).min(self.history.len() - 1);
        &self.history[idx]
    }

    pub fn records(&self) -> Vec<SafeSetRecord> {
        self.history
            .iter()
            .map(|e| SafeSetRecord {
                epoch: e.epoch,
                area: e.area(),
                vertices: e.vertices.clone(),
                h: (0..e.polytope.num_rows()).map(|j| e.polytope.row(j)).collect(),
                d: e.polytope.d().iter().copied().collect(),
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.records())?)
    }
}
