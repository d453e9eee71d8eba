//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::f64::consts::TAU;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tubecert::bench::{bench_complexity, linear_fit, loglog_slope};
use tubecert::run::env_spec;
use tubecert::{backup_return, collect_initial, initial_safe_set, run_training, RunConfig, RunMetrics};
use tubecert_core::certifier::{certify, CertifierConfig, Constraints};
use tubecert_core::dynamics::{default_hidden, make_prior, GaussianDynamicsModel, LinearGaussianModel, ProbabilisticDynamics, TransitionBatch};
use tubecert_core::ellipsoid::{inscribed_in_polytope, outer_sum, Ellipsoid, Polytope};
use tubecert_core::envs::{backup_policy, EnvKind, EnvSpec};
use tubecert_core::safe_set::{convex_hull_2d, SafeSetEstimate, TerminalSetSelector};
use tubecert_core::tube::{captures, propagate_one, rollout_bundle};
use tubecert_core::{Matrix, Vector};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_spd(n: usize, floor: f64, r: &mut ChaCha8Rng) -> Matrix {
    let l = Matrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
    &l * l.transpose() + Matrix::identity(n, n) * floor
}

fn unit(n: usize, r: &mut ChaCha8Rng) -> Vector {
    loop {
        let w = Vector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
        if w.norm() > 1e-9 {
            return w.normalize();
        }
    }
}

fn mahalanobis(c: &Vector, s: &Matrix, x: &Vector) -> f64 {
    let d = x - c;
    d.dot(&s.clone().cholesky().expect("positive definite").solve(&d))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    let mut outside = 0;
    for _ in 0..1000 {
        let n = r.random_range(1..=5);
        let s1 = random_spd(n, 1e-3, &mut r);
        let s2 = random_spd(n, 1e-3, &mut r) * r.random_range(0.01..10.0);
        let c1 = Vector::from_fn(n, |_, _| r.random_range(-2.0..2.0));
        let c2 = Vector::from_fn(n, |_, _| r.random_range(-2.0..2.0));
        let sum = outer_sum(&Ellipsoid::new(c1.clone(), s1.clone()).unwrap(), &Ellipsoid::new(c2.clone(), s2.clone()).unwrap()).unwrap();
        let (l1, l2) = (s1.cholesky().unwrap().l(), s2.cholesky().unwrap().l());
        for _ in 0..100 {
            let p = &c1 + &l1 * unit(n, &mut r) + &c2 + &l2 * unit(n, &mut r);
            let q = mahalanobis(sum.center(), sum.shape(), &p);
            worst = worst.max(q);
            outside += usize::from(q > 1.0 + 1e-9);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(outside == 0 && secs < 10.0, format!("{outside} of 100000 sums outside, max form {worst:.12}, {secs:.2} s"))
}

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    let mut disagree = 0;
    for _ in 0..1000 {
        let s = random_spd(2, 1e-3, &mut r);
        let c = Vector::from_fn(2, |_, _| r.random_range(-1.0..1.0));
        let rows = r.random_range(1..=6);
        let h = Matrix::from_fn(rows, 2, |_, _| r.random_range(-1.0..1.0));
        let d = Vector::from_fn(rows, |_, _| r.random_range(0.0..3.0));
        let p = Polytope::new(h.clone(), d.clone()).unwrap();
        let e = Ellipsoid::new(c.clone(), s.clone()).unwrap();
        let exact = inscribed_in_polytope(&e, &p).unwrap().iter().all(|g| *g <= 0.0);
        let l = s.cholesky().unwrap().l();
        let mut sampled = true;
        for i in 0..5000 {
            let th = TAU * i as f64 / 5000.0;
            let x = &c + &l * Vector::from_row_slice(&[th.cos(), th.sin()]);
            if (&h * &x - &d).max() > 1e-7 {
                sampled = false;
                break;
            }
        }
        disagree += usize::from(exact != sampled);
    }
    outcome(disagree == 0, format!("{disagree} disagreements on 1000 instances"))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    for kind in EnvKind::ALL {
        let spec = EnvSpec::new(kind);
        for seed in 0..10 {
            let mut r = rng(300 + seed);
            let mut m = GaussianDynamicsModel::new(spec.n_x, spec.n_u, &default_hidden(kind), &mut r).with_prior(Some(make_prior(kind, 0.2)));
            let x = Matrix::from_fn(spec.n_x, 16, |_, _| r.random_range(-0.5..0.5));
            let u = Matrix::from_fn(spec.n_u, 16, |i, _| r.random_range(spec.action_low[i]..spec.action_high[i]));
            let xn = Matrix::from_fn(spec.n_x, 16, |i, j| x[(i, j)] + r.random_range(-0.1..0.1));
            let batch = TransitionBatch::new(x.clone(), u.clone(), xn).unwrap();
            m.fit_normalizer(&batch);
            let g = m.nll_gradient(&batch).unwrap();
            let h = 1e-5;
            for i in 0..g.len() {
                let p0 = m.network().params()[i];
                m.network_mut().params_mut()[i] = p0 + h;
                let fp = m.nll_loss(&batch).unwrap();
                m.network_mut().params_mut()[i] = p0 - h;
                let fm = m.nll_loss(&batch).unwrap();
                m.network_mut().params_mut()[i] = p0;
                worst = worst.max(rel_err(g[i], (fp - fm) / (2.0 * h)));
            }
            let (x0, u0) = (x.column(0).into_owned(), u.column(0).into_owned());
            let lin = m.linearize(&x0, &u0).unwrap();
            for j in 0..spec.n_x + spec.n_u {
                let (mut xp, mut xm, mut up, mut um) = (x0.clone(), x0.clone(), u0.clone(), u0.clone());
                if j < spec.n_x {
                    xp[j] += h;
                    xm[j] -= h;
                } else {
                    up[j - spec.n_x] += h;
                    um[j - spec.n_x] -= h;
                }
                let (mp, _) = m.predict(&xp, &up).unwrap();
                let (mm, _) = m.predict(&xm, &um).unwrap();
                for i in 0..spec.n_x {
                    let a = if j < spec.n_x { lin.a[(i, j)] } else { lin.b[(i, j - spec.n_x)] };
                    worst = worst.max(rel_err(a, (mp[i] - mm[i]) / (2.0 * h)));
                }
            }
        }
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.3e} over 40 networks"))
}

fn criterion_4() -> Outcome {
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let a = Matrix::from_fn(3, 3, |_, _| r.random_range(-1.0..1.0));
        let b = Matrix::from_fn(3, 2, |_, _| r.random_range(-1.0..1.0));
        let k = Matrix::from_fn(2, 3, |_, _| r.random_range(-0.5..0.5));
        let model = LinearGaussianModel::new(a.clone(), b.clone(), Vector::zeros(3));
        let mut s = random_spd(3, 0.0, &mut r);
        let mut e = Ellipsoid::new(Vector::zeros(3), s.clone()).unwrap();
        let f = &a + &b * &k;
        for _ in 0..8 {
            let v = Vector::from_fn(2, |_, _| r.random_range(-1.0..1.0));
            e = propagate_one(&model, &e, &v, &k).unwrap();
            s = &f * s * f.transpose();
            worst = worst.max((e.shape() - &s).amax() / s.amax().max(1.0));
        }
    }
    let a = Matrix::from_row_slice(2, 2, &[1.0, 0.1, -0.05, 0.98]);
    let b = Matrix::from_row_slice(2, 1, &[0.005, 0.1]);
    let model = LinearGaussianModel::new(a.clone(), b.clone(), Vector::from_element(2, 1e-4));
    let sd = model.var.map(f64::sqrt);
    let k = Matrix::from_row_slice(1, 2, &[-1.0, -1.5]);
    let trials = 10_000;
    let mut captured = 0;
    for _ in 0..trials {
        let x0 = Vector::from_fn(2, |_, _| r.random_range(-0.5..0.5));
        let v: Vec<Vector> = (0..6).map(|_| Vector::from_element(1, r.random_range(-1.0..1.0))).collect();
        let bundle = rollout_bundle(std::slice::from_ref(&model), &x0, &v, &k).unwrap();
        let mut x = x0.clone();
        let mut traj = vec![x.clone()];
        for (i, vi) in v.iter().enumerate() {
            let w = loop {
                let z = Vector::from_fn(2, |_, _| r.sample::<f64, _>(StandardNormal));
                if z.norm_squared() <= 1.0 {
                    break z.component_mul(&sd);
                }
            };
            x = &a * &x + &b * (vi + &k * (&x - bundle.tubes[0].state(i))) + w;
            traj.push(x.clone());
        }
        captured += usize::from(captures(&bundle, &traj, (0, 1)).unwrap().all_captured());
    }
    let rate = captured as f64 / trials as f64;
    outcome(worst < 1e-10 && rate >= 0.99, format!("shape chain error {worst:.2e}, capture {:.2}%", 100.0 * rate))
}

/// Largest margin of a linear plan, propagated independently of the library.
fn plan_violation(models: &[LinearGaussianModel], x_t: &Vector, v: &[Vector], k: &Matrix, cons: &Constraints<'_>) -> f64 {
    let margin = |p: &Polytope, c: &Vector, s: &Matrix| {
        (0..p.num_rows())
            .map(|j| {
                let h = Vector::from_vec(p.row(j));
                h.dot(c) - p.d()[j] + h.dot(&(s * &h)).max(0.0).sqrt()
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut worst = cons.state.max_residual(x_t);
    for m in models {
        let n = x_t.len();
        let f = &m.a + &m.b * k;
        let w = Matrix::from_diagonal(&m.var);
        let (mut z, mut s) = (x_t.clone(), Matrix::zeros(n, n));
        for (i, vi) in v.iter().enumerate() {
            worst = worst.max(margin(cons.action, vi, &(k * &s * k.transpose())));
            let fs = &f * &s * f.transpose();
            let (tf, tw) = (fs.trace(), w.trace());
            s = if tf <= 1e-12 {
                w.clone()
            } else {
                let al = (tf / tw).sqrt();
                fs * (1.0 + 1.0 / al) + &w * (1.0 + al)
            };
            z = &m.a * z + &m.b * vi;
            worst = worst.max(margin(cons.state, &z, &s));
            if i + 1 == v.len() {
                worst = worst.max(margin(cons.terminal, &z, &s));
            }
        }
    }
    worst
}

fn criterion_5() -> Outcome {
    let b = Matrix::from_row_slice(2, 1, &[0.005, 0.1]);
    let var = Vector::from_element(2, 1e-6);
    let models = vec![
        LinearGaussianModel::new(Matrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]), b.clone(), var.clone()),
        LinearGaussianModel::new(Matrix::from_row_slice(2, 2, &[1.0, 0.1, -0.02, 0.99]), b, var),
    ];
    let k = Matrix::from_row_slice(1, 2, &[-1.0, -1.5]);
    let state = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
    let terminal = Polytope::from_box(&[-0.8, -0.8], &[0.8, 0.8]).unwrap();
    let action = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
    let cons = Constraints { state: &state, action: &action, terminal: &terminal };
    let cfg = CertifierConfig::new(5, k.clone());
    let mut r = rng(5);
    let (mut count, mut moved, mut bad_verify, mut infeasible) = (0, 0.0f64, 0, 0);
    while count < 50 {
        let x = Vector::from_fn(2, |_, _| r.random_range(-0.7..0.7));
        let u = Vector::from_element(1, r.random_range(-1.0..1.0));
        let mut tail = vec![u.clone()];
        tail.extend((1..5).map(|_| Vector::zeros(1)));
        if plan_violation(&models, &x, &tail, &k, &cons) > -1e-3 {
            continue;
        }
        count += 1;
        let res = certify(&models, &x, &u, &cons, &cfg, None).unwrap();
        if !res.feasible {
            infeasible += 1;
            continue;
        }
        moved = moved.max((&res.action - &u).norm());
        let plan = res.policy.as_ref().unwrap();
        bad_verify += usize::from(plan_violation(&models, &x, &plan.actions, &k, &cons) > 1e-6);
    }
    outcome(
        infeasible == 0 && moved <= 1e-3 && bad_verify == 0,
        format!("max ‖u−v₀‖ {moved:.2e}, {infeasible} infeasible, {bad_verify} failed re-verification"),
    )
}

fn criterion_6() -> Outcome {
    let (a, b) = (1.2, 0.5);
    let model = LinearGaussianModel::new(Matrix::from_element(1, 1, a), Matrix::from_element(1, 1, b), Vector::zeros(1));
    let state = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
    let terminal = Polytope::from_box(&[-0.2], &[0.2]).unwrap();
    let action = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
    let cons = Constraints { state: &state, action: &action, terminal: &terminal };
    let cfg = CertifierConfig::new(2, Matrix::from_element(1, 1, -1.0));
    let grid: Vec<f64> = (0..=200).map(|i| -1.0 + 0.01 * i as f64).collect();
    let ok = |x: f64, v0: f64| {
        let x1 = a * x + b * v0;
        x1.abs() <= 1.0 && grid.iter().any(|v1| (a * x1 + b * v1).abs() <= 0.2)
    };
    let mut r = rng(6);
    let mut agree = 0;
    for _ in 0..200 {
        let x = r.random_range(-1.0..1.0);
        let u = r.random_range(-1.0..1.0);
        let expected = if ok(x, u) { 0 } else if grid.iter().any(|v| ok(x, *v)) { 1 } else { 2 };
        let res = certify(std::slice::from_ref(&model), &Vector::from_element(1, x), &Vector::from_element(1, u), &cons, &cfg, None).unwrap();
        let got = if !res.feasible { 2 } else if (res.action[0] - u).abs() <= 1e-3 { 0 } else { 1 };
        agree += usize::from(got == expected);
    }
    outcome(agree >= 198, format!("{agree}/200 decisions agree with the grid"))
}

fn pendulum_config(seed: u64, certify: bool, dir: &str) -> RunConfig {
    let mut cfg = RunConfig::for_env(EnvKind::Pendulum);
    cfg.seed = seed;
    cfg.epochs = 30;
    cfg.steps_per_epoch = 400;
    cfg.ensemble_size = 3;
    cfg.horizon = 5;
    cfg.delay = 10;
    cfg.prior_offset = 0.2;
    cfg.certify = certify;
    cfg.out_dir = std::env::temp_dir().join(format!("tubecert-acceptance-{}/{dir}-{seed}", std::process::id()));
    cfg
}

struct PendulumRuns {
    certified: Vec<RunMetrics>,
    ablation: Vec<RunMetrics>,
    backup: Vec<f64>,
    dirs: Vec<PathBuf>,
}

fn pendulum_runs() -> PendulumRuns {
    let mut runs = PendulumRuns { certified: Vec::new(), ablation: Vec::new(), backup: Vec::new(), dirs: Vec::new() };
    for seed in 0..3 {
        let cfg = pendulum_config(seed, true, "certified");
        let start = Instant::now();
        runs.certified.push(run_training(&cfg).expect("certified run"));
        println!("  certified seed {seed}: {:.0} s", start.elapsed().as_secs_f64());
        runs.backup.push(backup_return(&env_spec(&cfg), 1000 + seed, 10).unwrap());
        runs.dirs.push(cfg.out_dir.clone());
        let cfg = pendulum_config(seed, false, "ablation");
        let start = Instant::now();
        runs.ablation.push(run_training(&cfg).expect("ablation run"));
        println!("  ablation seed {seed}: {:.0} s", start.elapsed().as_secs_f64());
    }
    runs
}

fn criterion_7(runs: &PendulumRuns) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, m) in runs.certified.iter().enumerate() {
        let ret = m.final_return().unwrap_or(f64::NAN);
        pass &= m.total_violations() == 0 && ret > runs.backup[i];
        parts.push(format!("seed {i}: {} violations, return {ret:.1} vs backup {:.1}", m.total_violations(), runs.backup[i]));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_8(runs: &PendulumRuns) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (a, c) in runs.ablation.iter().zip(&runs.certified) {
        pass &= a.total_violations() >= 10 && a.total_violations() > c.total_violations();
        parts.push(format!("{} vs {}", a.total_violations(), c.total_violations()));
    }
    outcome(pass, format!("uncertified vs certified violations per seed: {}", parts.join(", ")))
}

fn criterion_9() -> Outcome {
    let mut cfg = RunConfig::for_env(EnvKind::Pendulum);
    cfg.ensemble_size = 3;
    let rows = bench_complexity(&cfg, &[3, 5, 7, 9], &[], &[1, 3, 5], 30).expect("bench");
    let pick = |sweep: &str| -> (Vec<f64>, Vec<f64>) {
        rows.iter().filter(|r| r.sweep == sweep).map(|r| (r.value as f64, r.median_ms)).unzip()
    };
    let (n, t) = pick("horizon");
    let increasing = t.windows(2).all(|w| w[1] > w[0]);
    let slope = loglog_slope(&n, &t);
    let (m, tm) = pick("ensemble");
    let (_, r2) = linear_fit(&m, &tm);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/");
    outcome(
        increasing && (2.0..=4.0).contains(&slope) && r2 > 0.9,
        format!("horizon medians {} ms, slope {slope:.2}; ensemble medians {} ms, R² {r2:.3}", fmt(&t), fmt(&tm)),
    )
}

fn criterion_10(runs: &PendulumRuns) -> Outcome {
    let mut r = rng(10);
    let mut hull_mismatch = 0;
    for set in 0..100 {
        let n = r.random_range(1..30);
        let pts: Vec<[f64; 2]> = if set % 2 == 0 {
            (0..n).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect()
        } else {
            (0..n).map(|_| [r.random_range(-3..=3) as f64, r.random_range(-3..=3) as f64]).collect()
        };
        let mut hull = convex_hull_2d(&pts).unwrap();
        let mut oracle = extreme_points(&pts);
        let key = |a: &[f64; 2], b: &[f64; 2]| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1]));
        hull.sort_by(key);
        oracle.sort_by(key);
        hull_mismatch += usize::from(hull != oracle);
    }

    let mut sel_mismatch = 0;
    let polytope = Polytope::from_box(&[-10.0, -10.0], &[10.0, 10.0]).unwrap();
    let mut est = |epoch: usize| {
        let pts: Vec<Vec<f64>> = (0..6).map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
        SafeSetEstimate::from_states(pts.iter().map(Vec::as_slice), epoch, (0, 1), &polytope).unwrap()
    };
    let delay = 10;
    let mut sel = TerminalSetSelector::new(est(0), delay);
    let mut stored = vec![sel.history()[0].clone()];
    for j in 1..=30 {
        let e = est(j);
        stored.push(e.clone());
        sel.push(e);
        let want = &stored[j.saturating_sub(delay)];
        sel_mismatch += usize::from(sel.select(j) != want);
    }
    for dir in &runs.dirs {
        let text = std::fs::read_to_string(dir.join("safe_sets.json")).unwrap();
        let records: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
        sel_mismatch += usize::from(records.len() != 31);
        sel_mismatch += records.iter().enumerate().filter(|(i, v)| v["epoch"] != *i).count();
    }

    let spec = EnvSpec::new(EnvKind::Pendulum);
    let mut outside = 0;
    let mut total = 0;
    for seed in 0..3 {
        let mut backup = backup_policy(&spec, seed);
        let d0 = collect_initial(&spec, backup.as_mut(), 8000, seed).unwrap();
        let term = initial_safe_set(&spec, &d0).unwrap();
        for x in d0.initial_states() {
            total += 1;
            outside += usize::from(!term.polytope.contains(&Vector::from_row_slice(x), 1e-9));
        }
    }
    outcome(
        hull_mismatch == 0 && sel_mismatch == 0 && outside == 0 && total > 0,
        format!("{hull_mismatch} hull mismatches, {sel_mismatch} selection mismatches, {outside}/{total} initial states outside"),
    )
}

/// Distinct points not inside any triangle of other points and not strictly
/// between two other points.
fn extreme_points(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut p: Vec<[f64; 2]> = Vec::new();
    for q in points {
        if !p.contains(q) {
            p.push(*q);
        }
    }
    let n = p.len();
    let between = |x: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        cross(a, b, x) == 0.0 && (x[0] - a[0]) * (x[0] - b[0]) <= 0.0 && (x[1] - a[1]) * (x[1] - b[1]) <= 0.0
    };
    let inside = |x: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]| {
        let d = [cross(a, b, x), cross(b, c, x), cross(c, a, x)];
        !(d.iter().any(|v| *v < 0.0) && d.iter().any(|v| *v > 0.0))
    };
    (0..n)
        .filter(|&i| {
            for a in 0..n {
                for b in 0..n {
                    if a == i || b == i || a == b {
                        continue;
                    }
                    if between(p[i], p[a], p[b]) {
                        return false;
                    }
                    for c in 0..n {
                        if c != i && c != a && c != b && cross(p[a], p[b], p[c]) != 0.0 && inside(p[i], p[a], p[b], p[c]) {
                            return false;
                        }
                    }
                }
            }
            true
        })
        .map(|i| p[i])
        .collect()
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |id: usize, o: Outcome| {
        println!("criterion {id:>2}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());
    report(6, criterion_6());
    let runs = pendulum_runs();
    report(7, criterion_7(&runs));
    report(8, criterion_8(&runs));
    report(9, criterion_9());
    report(10, criterion_10(&runs));
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(i, _)| *i).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
