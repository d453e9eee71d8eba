use proptest::prelude::*;
use tubecert_core::ellipsoid::Polytope;
use tubecert_core::safe_set::{convex_hull_2d, hull_to_polytope, polygon_area, SafeSetEstimate, TerminalSetSelector};
use tubecert_core::Vector;

type P = [f64; 2];

fn cross(o: P, a: P, b: P) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn in_triangle(p: P, a: P, b: P, c: P) -> bool {
    let (d1, d2, d3) = (cross(a, b, p), cross(b, c, p), cross(c, a, p));
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

fn on_open_segment(p: P, a: P, b: P) -> bool {
    cross(a, b, p) == 0.0
        && p != a
        && p != b
        && p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

/// Extreme points: not inside any triangle of other distinct points and not
/// strictly between two other points.
fn brute_force_vertices(points: &[P]) -> Vec<P> {
    let mut distinct: Vec<P> = Vec::new();
    for p in points {
        if !distinct.contains(p) {
            distinct.push(*p);
        }
    }
    let n = distinct.len();
    let mut out = Vec::new();
    'outer: for i in 0..n {
        let p = distinct[i];
        for a in 0..n {
            for b in 0..n {
                if a == i || b == i || a == b {
                    continue;
                }
                if on_open_segment(p, distinct[a], distinct[b]) {
                    continue 'outer;
                }
                for c in 0..n {
                    if c == i || c == a || c == b {
                        continue;
                    }
                    let (ta, tb, tc) = (distinct[a], distinct[b], distinct[c]);
                    if cross(ta, tb, tc) != 0.0 && in_triangle(p, ta, tb, tc) {
                        continue 'outer;
                    }
                }
            }
        }
        out.push(p);
    }
    out
}

fn sorted(mut v: Vec<P>) -> Vec<P> {
    v.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    v
}

/// Integer grids produce duplicates and collinear boundary points.
fn grid_points() -> impl Strategy<Value = Vec<P>> {
    prop::collection::vec((-4i32..=4, -4i32..=4).prop_map(|(x, y)| [x as f64, y as f64]), 1..24)
}

fn box2() -> Polytope {
    Polytope::from_box(&[-100.0, -100.0], &[100.0, 100.0]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hull_matches_brute_force(points in grid_points()) {
        let hull = convex_hull_2d(&points).unwrap();
        prop_assert_eq!(sorted(hull.clone()), sorted(brute_force_vertices(&points)));
        if hull.len() >= 3 {
            prop_assert!(polygon_area(&hull) > 0.0);
            for i in 0..hull.len() {
                let (a, b, c) = (hull[i], hull[(i + 1) % hull.len()], hull[(i + 2) % hull.len()]);
                prop_assert!(cross(a, b, c) > 0.0);
            }
        }
    }

    #[test]
    fn polytope_contains_inputs_and_convex_combinations(
        points in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0).prop_map(|(x, y)| [x, y]), 3..40),
        w in prop::collection::vec(0.0f64..1.0, 40),
    ) {
        let hull = convex_hull_2d(&points).unwrap();
        let p = hull_to_polytope(&hull, (0, 1), 2).unwrap();
        for q in &points {
            prop_assert!(p.contains(&Vector::from_row_slice(q), 1e-9));
        }
        let total: f64 = w.iter().take(points.len()).sum::<f64>().max(1e-12);
        let mut mix = [0.0, 0.0];
        for (q, wi) in points.iter().zip(&w) {
            mix[0] += q[0] * wi / total;
            mix[1] += q[1] * wi / total;
        }
        prop_assert!(p.contains(&Vector::from_row_slice(&mix), 1e-9));
    }

    #[test]
    fn estimate_grows_with_data(
        a in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0).prop_map(|(x, y)| vec![x, y]), 3..20),
        b in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0).prop_map(|(x, y)| vec![x, y]), 0..20),
    ) {
        let small = SafeSetEstimate::from_states(a.iter().map(Vec::as_slice), 0, (0, 1), &box2()).unwrap();
        let big = SafeSetEstimate::from_states(a.iter().chain(&b).map(Vec::as_slice), 1, (0, 1), &box2()).unwrap();
        for v in &small.vertices {
            prop_assert!(big.contains_planar(*v, 1e-9));
        }
        prop_assert!(big.area() >= small.area() - 1e-12);
    }

    #[test]
    fn delayed_selection_reads_the_stored_history(delay in 0usize..8, epochs in 1usize..25, seed in any::<u64>()) {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        let estimate = |epoch: usize, pts: Vec<Vec<f64>>| SafeSetEstimate::from_states(pts.iter().map(Vec::as_slice), epoch, (0, 1), &box2()).unwrap();
        let mut sel = TerminalSetSelector::new(estimate(0, (0..5).map(|_| vec![next(), next()]).collect()), delay);
        for j in 1..=epochs {
            sel.push(estimate(j, (0..5).map(|_| vec![next(), next()]).collect()));
        }
        let stored: Vec<SafeSetEstimate> = sel.history().to_vec();
        for j in 0..=epochs {
            let expected = if j < delay { &stored[0] } else { &stored[j - delay] };
            prop_assert_eq!(sel.select(j), expected);
            prop_assert_eq!(sel.select(j).epoch, j.saturating_sub(delay));
        }
    }
}

#[test]
fn history_json_round_trips_bit_exactly() {
    let pts = [vec![0.1, 0.2], vec![1.0 / 3.0, -0.7], vec![-0.9, 0.05], vec![0.4, 0.9]];
    let est = SafeSetEstimate::from_states(pts.iter().map(Vec::as_slice), 0, (0, 1), &box2()).unwrap();
    let sel = TerminalSetSelector::new(est.clone(), 3);
    let parsed: serde_json::Value = serde_json::from_str(&sel.to_json().unwrap()).unwrap();
    let vertices: Vec<P> = serde_json::from_value(parsed[0]["vertices"].clone()).unwrap();
    assert_eq!(vertices, est.vertices);
    let d: Vec<f64> = serde_json::from_value(parsed[0]["d"].clone()).unwrap();
    assert_eq!(d, est.polytope.d().as_slice());
}
