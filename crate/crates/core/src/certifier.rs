//! Per-step certification of a proposed action.
//!
//! The decision variables are the nominal actions `v_0 … v_{N−1}`. Every
//! evaluation re-rolls the tube bundle from `E(x_t, 0)` and differentiates it
//! with forward tangents, holding the model Jacobians `A_k, B_k` fixed at the
//! current nominal trajectory. Constraints are handled by an augmented
//! Lagrangian (outer loop) whose subproblems are solved by BFGS with Armijo
//! backtracking (inner loop). A returned plan is feasible only if it passes an
//! exact re-check with unsmoothed margins.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::ProbabilisticDynamics;
use crate::ellipsoid::{inscribed_in_polytope, outer_sum_shape, tighten_action_polytope, Polytope, TRACE_EPS};
use crate::error::check_dim;
use crate::tube::{rollout_bundle, TubeBundle};
use crate::{Error, Matrix, Result, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifierConfig {
    pub horizon: usize,
    /// Tube feedback gain `K` (`n_u × n_x`).
    pub feedback: Matrix,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    /// Cap on tube-bundle rollouts per solve.
    pub rollout_budget: usize,
    pub tolerance: f64,
    pub penalty_initial: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    pub soft_penalty: f64,
    /// Added under the square roots of the margins inside the solver.
    pub smoothing: f64,
    pub gradient_tolerance: f64,
    pub warm_start: bool,
    /// Consecutive infeasible solves before soft mode engages.
    pub infeasible_threshold: usize,
    pub record_trace: bool,
}

impl CertifierConfig {
    pub fn new(horizon: usize, feedback: Matrix) -> Self {
        Self {
            horizon,
            feedback,
            max_outer_iterations: 12,
            max_inner_iterations: 60,
            rollout_budget: 5000,
            tolerance: 1e-6,
            penalty_initial: 10.0,
            penalty_growth: 10.0,
            penalty_max: 1e6,
            soft_penalty: 1e4,
            smoothing: 1e-12,
            gradient_tolerance: 1e-9,
            warm_start: true,
            infeasible_threshold: horizon,
            record_trace: false,
        }
    }

    /// `K` with every entry equal to `fill`.
    pub fn with_fill(horizon: usize, n_u: usize, n_x: usize, fill: f64) -> Self {
        Self::new(horizon, Matrix::from_element(n_u, n_x, fill))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(self.penalty_initial > 0.0 && self.penalty_max >= self.penalty_initial) {
            return bad("penalties must be positive and the cap at least the initial value");
        }
        if !(self.penalty_growth > 1.0) {
            return bad("penalty growth must exceed 1");
        }
        if !(self.soft_penalty > 0.0 && self.tolerance > 0.0) {
            return bad("soft penalty and tolerance must be positive");
        }
        if self.max_outer_iterations == 0 || self.max_inner_iterations == 0 || self.rollout_budget == 0 {
            return bad("iteration limits must be positive");
        }
        if self.feedback.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feedback gain"));
        }
        Ok(())
    }
}

/// State, action and terminal polytopes of one problem.
#[derive(Debug, Clone, Copy)]
pub struct Constraints<'a> {
    pub state: &'a Polytope,
    pub action: &'a Polytope,
    pub terminal: &'a Polytope,
}

/// Affine stage controllers `v_k + K (x − z_k)` clipped to the action box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPolicySequence {
    pub actions: Vec<Vector>,
    pub states: Vec<Vector>,
    pub feedback: Matrix,
    pub origin: usize,
    pub low: Vector,
    pub high: Vector,
}

impl FeedbackPolicySequence {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Stage `k` at `x`; the flag reports whether clipping was active.
    pub fn evaluate(&self, k: usize, x: &Vector) -> (Vector, bool) {
        let raw = &self.actions[k] + &self.feedback * (x - &self.states[k]);
        let clipped = Vector::from_fn(raw.len(), |i, _| raw[i].clamp(self.low[i], self.high[i]));
        let was_clipped = clipped != raw;
        (clipped, was_clipped)
    }

    /// Drops the first stage unless only one remains.
    pub fn shifted(&self) -> Self {
        let mut next = self.clone();
        if next.actions.len() >= 2 {
            next.actions.remove(0);
            next.states.remove(0);
        }
        next.origin += 1;
        next
    }
}

/// Reuses the previous plan: advances it one stage and evaluates the new
/// first stage at `x_t`.
pub fn fallback_action(prev: &FeedbackPolicySequence, x_t: &Vector) -> (Vector, FeedbackPolicySequence) {
    let next = prev.shifted();
    let (u, _) = next.evaluate(0, x_t);
    (u, next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CertificationMode {
    Hard,
    Soft,
    Fallback,
    /// No plan existed yet; the backup controller acted.
    Backup,
    /// Certification disabled.
    Uncertified,
}

impl CertificationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CertificationMode::Hard => "hard",
            CertificationMode::Soft => "soft",
            CertificationMode::Fallback => "fallback",
            CertificationMode::Backup => "backup",
            CertificationMode::Uncertified => "uncertified",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub max_violation: f64,
    pub penalty: f64,
}

pub fn write_trace_csv(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,objective,max_violation,penalty")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.iteration, r.objective, r.max_violation, r.penalty)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    /// Outer (multiplier/penalty) iterations.
    pub iterations: usize,
    pub rollouts: usize,
    /// Largest exact constraint violation of the returned plan.
    pub max_violation: f64,
    /// `‖u_t − v_0‖²`.
    pub objective: f64,
    pub penalty: f64,
    pub trace: Vec<TraceRow>,
    pub message: String,
}

/// Solver state carried into the next solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub actions: Vec<Vector>,
    pub multipliers: Option<Vec<f64>>,
    pub penalty: Option<f64>,
}

impl WarmStart {
    /// Receding-horizon guess: drop `v_0`, repeat the last action.
    pub fn shifted(&self) -> Self {
        let mut actions = self.actions.clone();
        if !actions.is_empty() {
            actions.remove(0);
            actions.push(actions.last().cloned().unwrap_or_else(|| self.actions[0].clone()));
        }
        Self {
            actions,
            multipliers: None,
            penalty: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CertificationResult {
    pub feasible: bool,
    pub action: Vector,
    pub policy: Option<FeedbackPolicySequence>,
    pub mode: CertificationMode,
    pub diagnostics: SolverDiagnostics,
    /// Exact bundle of the returned plan (absent after a blow-up).
    pub bundle: Option<TubeBundle>,
    pub warm_start: WarmStart,
}

struct Eval {
    objective: f64,
    g: Vec<f64>,
    grad_f: Vec<f64>,
    /// Row-major `m × D` constraint Jacobian.
    jac: Vec<f64>,
}

struct Problem<'a, M> {
    members: &'a [M],
    x_t: &'a Vector,
    u_t: &'a Vector,
    k: &'a Matrix,
    cons: Constraints<'a>,
    horizon: usize,
    n_x: usize,
    n_u: usize,
    eps: f64,
    /// `Kᵀ h_j` for each action row.
    kh: Vec<Vector>,
    rollouts: usize,
}

fn row_vec(p: &Polytope, j: usize) -> Vector {
    Vector::from_vec(p.row(j))
}

impl<'a, M: ProbabilisticDynamics> Problem<'a, M> {
    fn dim(&self) -> usize {
        self.horizon * self.n_u
    }

    fn rows_per_member(&self) -> usize {
        self.horizon * (self.cons.action.num_rows() + self.cons.state.num_rows())
            + self.cons.terminal.num_rows()
    }

    fn num_constraints(&self) -> usize {
        self.members.len() * self.rows_per_member()
    }

    fn actions(&self, v: &[f64]) -> Vec<Vector> {
        v.chunks(self.n_u).map(Vector::from_column_slice).collect()
    }

    fn evaluate(&mut self, v: &[f64], with_grad: bool) -> Result<Eval> {
        self.rollouts += 1;
        let d_dim = self.dim();
        let (n, nu, eps) = (self.n_x, self.n_u, self.eps);
        let m = self.num_constraints();
        let mut g = Vec::with_capacity(m);
        let mut jac = if with_grad { vec![0.0; m * d_dim] } else { Vec::new() };
        let acts = self.actions(v);
        let diff: Vec<f64> = (0..nu).map(|i| v[i] - self.u_t[i]).collect();
        let objective = diff.iter().map(|d| d * d).sum();
        let mut grad_f = vec![0.0; d_dim];
        for i in 0..nu {
            grad_f[i] = 2.0 * diff[i];
        }
        let k = self.k;
        let cons = self.cons;
        for model in self.members {
            let mut z = self.x_t.clone();
            let mut s = Matrix::zeros(n, n);
            let mut dz = Matrix::zeros(n, d_dim);
            let mut ds: Vec<Matrix> = if with_grad { vec![Matrix::zeros(n, n); d_dim] } else { Vec::new() };
            for step in 0..self.horizon {
                let vk = &acts[step];
                // Action rows: v_k ∈ U ⊖ E(0, K S_k Kᵀ).
                for j in 0..cons.action.num_rows() {
                    let h = row_vec(cons.action, j);
                    let kh = &self.kh[j];
                    let q = kh.dot(&(&s * kh)).max(0.0);
                    let root = (q + eps).sqrt();
                    let row = g.len();
                    g.push(h.dot(vk) + root - cons.action.d()[j]);
                    if with_grad {
                        let jr = &mut jac[row * d_dim..(row + 1) * d_dim];
                        for a in 0..nu {
                            jr[step * nu + a] += h[a];
                        }
                        for (dd, dsd) in ds.iter().enumerate() {
                            jr[dd] += kh.dot(&(dsd * kh)) / (2.0 * root);
                        }
                    }
                }
                let lin = model.linearize(&z, vk)?;
                let f = &lin.a + &lin.b * k;
                let p = &f * &s * f.transpose();
                let q = Matrix::from_diagonal(&lin.var);
                let s_next = outer_sum_shape(&p, &q);
                if with_grad {
                    let mut dz_next = &lin.a * &dz;
                    for a in 0..nu {
                        let col = step * nu + a;
                        let mut c = dz_next.column_mut(col);
                        c += lin.b.column(a);
                    }
                    let dvar = &lin.var_dx * &dz + {
                        let mut du = Matrix::zeros(n, d_dim);
                        for a in 0..nu {
                            du.set_column(step * nu + a, &lin.var_du.column(a));
                        }
                        du
                    };
                    let (tp, tq) = (p.trace(), q.trace());
                    let mut ds_next = Vec::with_capacity(d_dim);
                    for (dd, dsd) in ds.iter().enumerate() {
                        let dp = &f * dsd * f.transpose();
                        let dq = Matrix::from_diagonal(&dvar.column(dd).into_owned());
                        let out = if tq <= TRACE_EPS {
                            dp
                        } else if tp <= TRACE_EPS {
                            dq
                        } else {
                            let alpha = (tp / tq).sqrt();
                            let dalpha = 0.5 * alpha * (dp.trace() / tp - dq.trace() / tq);
                            dp * (1.0 + 1.0 / alpha) - &p * (dalpha / (alpha * alpha))
                                + dq * (1.0 + alpha)
                                + &q * dalpha
                        };
                        ds_next.push(out);
                    }
                    dz = dz_next;
                    ds = ds_next;
                }
                z = lin.mean;
                s = s_next;
                if z.iter().chain(s.iter()).any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("tube rollout"));
                }
                let push_rows = |poly: &Polytope, g: &mut Vec<f64>, jac: &mut Vec<f64>| {
                    for j in 0..poly.num_rows() {
                        let h = row_vec(poly, j);
                        let qf = h.dot(&(&s * &h)).max(0.0);
                        let root = (qf + eps).sqrt();
                        let row = g.len();
                        g.push(h.dot(&z) + root - poly.d()[j]);
                        if with_grad {
                            let hz = h.transpose() * &dz;
                            let jr = &mut jac[row * d_dim..(row + 1) * d_dim];
                            for (dd, dsd) in ds.iter().enumerate() {
                                jr[dd] = hz[dd] + h.dot(&(dsd * &h)) / (2.0 * root);
                            }
                        }
                    }
                };
                push_rows(cons.state, &mut g, &mut jac);
                if step + 1 == self.horizon {
                    push_rows(cons.terminal, &mut g, &mut jac);
                }
            }
        }
        Ok(Eval {
            objective,
            g,
            grad_f,
            jac,
        })
    }
}

/// Augmented-Lagrangian merit `f + (1/2μ) Σ [max(0, λ + μ g)² − λ²]` and its gradient.
fn merit(e: &Eval, lambda: &[f64], mu: f64, d_dim: usize) -> (f64, Vec<f64>) {
    let mut value = e.objective;
    let mut grad = e.grad_f.clone();
    for (j, (&gj, &lj)) in e.g.iter().zip(lambda).enumerate() {
        let t = (lj + mu * gj).max(0.0);
        value += (t * t - lj * lj) / (2.0 * mu);
        if t > 0.0 && !e.jac.is_empty() {
            let row = &e.jac[j * d_dim..(j + 1) * d_dim];
            for (gd, r) in grad.iter_mut().zip(row) {
                *gd += t * r;
            }
        }
    }
    (value, grad)
}

enum InnerStatus {
    Converged,
    Stalled,
    Budget,
}

struct Inner {
    v: Vec<f64>,
    eval: Eval,
    status: InnerStatus,
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// BFGS on the merit for fixed `(λ, μ)`.
fn minimize<M: ProbabilisticDynamics>(
    prob: &mut Problem<'_, M>,
    v0: Vec<f64>,
    start: Eval,
    lambda: &[f64],
    mu: f64,
    cfg: &CertifierConfig,
) -> Result<Inner> {
    let d_dim = prob.dim();
    let mut v = v0;
    let mut eval = start;
    let (mut fval, mut grad) = merit(&eval, lambda, mu, d_dim);
    let mut h_inv = Matrix::identity(d_dim, d_dim);
    let mut first = true;
    for _ in 0..cfg.max_inner_iterations {
        if inf_norm(&grad) <= cfg.gradient_tolerance * (1.0 + fval.abs()) {
            return Ok(Inner { v, eval, status: InnerStatus::Converged });
        }
        let gvec = Vector::from_column_slice(&grad);
        let mut p = -(&h_inv * &gvec);
        let mut slope = p.dot(&gvec);
        if slope >= 0.0 {
            h_inv = Matrix::identity(d_dim, d_dim);
            p = -gvec.clone();
            slope = -gvec.norm_squared();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            if prob.rollouts >= cfg.rollout_budget {
                return Ok(Inner { v, eval, status: InnerStatus::Budget });
            }
            let trial: Vec<f64> = v.iter().zip(p.iter()).map(|(a, b)| a + step * b).collect();
            let e = prob.evaluate(&trial, false)?;
            let (tv, _) = merit(&e, lambda, mu, d_dim);
            if tv <= fval + 1e-4 * step * slope {
                accepted = Some(trial);
                break;
            }
            step *= 0.5;
        }
        let Some(trial) = accepted else {
            return Ok(Inner { v, eval, status: InnerStatus::Stalled });
        };
        if prob.rollouts >= cfg.rollout_budget {
            return Ok(Inner { v, eval, status: InnerStatus::Budget });
        }
        let e = prob.evaluate(&trial, true)?;
        let (nv, ng) = merit(&e, lambda, mu, d_dim);
        let s = Vector::from_iterator(d_dim, trial.iter().zip(&v).map(|(a, b)| a - b));
        let y = Vector::from_iterator(d_dim, ng.iter().zip(&grad).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                h_inv = Matrix::identity(d_dim, d_dim) * (sy / y.norm_squared());
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            h_inv += (&s * s.transpose()) * (rho * (1.0 + rho * yhy))
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let small_move = inf_norm(s.as_slice()) <= 1e-14 * (1.0 + inf_norm(&trial));
        v = trial;
        eval = e;
        fval = nv;
        grad = ng;
        if small_move {
            return Ok(Inner { v, eval, status: InnerStatus::Stalled });
        }
    }
    Ok(Inner { v, eval, status: InnerStatus::Stalled })
}

fn action_box(p: &Polytope) -> Result<(Vector, Vector)> {
    p.axis_box()
        .ok_or_else(|| Error::InvalidArgument("action polytope must be an axis-aligned box".into()))
}

fn clip(u: &Vector, low: &Vector, high: &Vector) -> Vector {
    Vector::from_fn(u.len(), |i, _| u[i].clamp(low[i], high[i]))
}

/// Largest positive violation of the exact constraints and the bundle it was
/// measured on; `None` for the bundle after a blow-up.
fn verify<M: ProbabilisticDynamics>(
    members: &[M],
    x_t: &Vector,
    actions: &[Vector],
    k: &Matrix,
    cons: &Constraints<'_>,
) -> (f64, Option<TubeBundle>) {
    let Ok(bundle) = rollout_bundle(members, x_t, actions, k) else {
        return (f64::INFINITY, None);
    };
    let mut worst = cons.state.max_residual(x_t).max(0.0);
    for tube in &bundle.tubes {
        for (step, e) in tube.ellipsoids.iter().enumerate() {
            if step > 0 {
                let g = inscribed_in_polytope(e, cons.state).expect("dimensions checked");
                worst = worst.max(g.max());
            }
            if step == actions.len() {
                let g = inscribed_in_polytope(e, cons.terminal).expect("dimensions checked");
                worst = worst.max(g.max());
            } else {
                let tight = tighten_action_polytope(cons.action, k, e.shape()).expect("dimensions checked");
                if tight.has_opposing_conflict() {
                    worst = f64::INFINITY;
                }
                worst = worst.max(tight.max_residual(&actions[step]));
            }
        }
    }
    (worst.max(0.0), Some(bundle))
}

fn mean_centers(bundle: &TubeBundle, k: usize) -> Vector {
    let mut z = Vector::zeros(bundle.tubes[0].state(k).len());
    for t in &bundle.tubes {
        z += t.state(k);
    }
    z / bundle.len() as f64
}

fn policy_from(bundle: &TubeBundle, actions: &[Vector], k: &Matrix, low: &Vector, high: &Vector) -> FeedbackPolicySequence {
    FeedbackPolicySequence {
        actions: actions.to_vec(),
        states: (0..actions.len()).map(|s| mean_centers(bundle, s)).collect(),
        feedback: k.clone(),
        origin: 0,
        low: low.clone(),
        high: high.clone(),
    }
}

fn check_problem<M: ProbabilisticDynamics>(
    members: &[M],
    x_t: &Vector,
    u_t: &Vector,
    cons: &Constraints<'_>,
    cfg: &CertifierConfig,
) -> Result<()> {
    cfg.validate()?;
    let first = members.first().ok_or(Error::EmptyInput)?;
    let (n, nu) = (first.state_dim(), first.action_dim());
    check_dim("certifier state", n, x_t.len())?;
    check_dim("certifier action", nu, u_t.len())?;
    check_dim("state polytope", n, cons.state.dim())?;
    check_dim("terminal polytope", n, cons.terminal.dim())?;
    check_dim("action polytope", nu, cons.action.dim())?;
    check_dim("feedback rows", nu, cfg.feedback.nrows())?;
    check_dim("feedback cols", n, cfg.feedback.ncols())?;
    if x_t.iter().chain(u_t.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("certifier input"));
    }
    Ok(())
}

fn initial_guess(u_t: &Vector, low: &Vector, high: &Vector, horizon: usize, warm: Option<&WarmStart>) -> Vec<f64> {
    let center = (low + high) * 0.5;
    let mut v = Vec::with_capacity(horizon * u_t.len());
    v.extend_from_slice(u_t.as_slice());
    for s in 1..horizon {
        let a = warm
            .and_then(|w| w.actions.get(s))
            .filter(|a| a.len() == u_t.len())
            .unwrap_or(&center);
        v.extend_from_slice(a.as_slice());
    }
    v
}

struct Outcome {
    v: Vec<f64>,
    lambda: Vec<f64>,
    mu: f64,
    iterations: usize,
    trace: Vec<TraceRow>,
    message: String,
}

fn solve<M: ProbabilisticDynamics>(
    prob: &mut Problem<'_, M>,
    v0: Vec<f64>,
    lambda0: Vec<f64>,
    mu0: f64,
    cfg: &CertifierConfig,
    soft: bool,
) -> Result<Outcome> {
    let mut v = v0;
    let mut lambda = lambda0;
    let mut mu = mu0;
    let mut trace = Vec::new();
    let mut eval = prob.evaluate(&v, true)?;
    let mut prev_v = f64::INFINITY;
    let mut best_violation = f64::INFINITY;
    let mut stagnant = 0;
    let max_outer = if soft { 1 } else { cfg.max_outer_iterations };
    let mut message = String::from("iteration limit");
    let mut iterations = 0;
    for it in 1..=max_outer {
        iterations = it;
        let inner = minimize(prob, v, eval, &lambda, mu, cfg)?;
        v = inner.v;
        eval = inner.eval;
        let violation = eval.g.iter().fold(0.0f64, |m, g| m.max(*g));
        if cfg.record_trace {
            trace.push(TraceRow {
                iteration: it,
                objective: eval.objective,
                max_violation: violation,
                penalty: mu,
            });
        }
        if soft {
            message = "soft".into();
            break;
        }
        let kkt = eval
            .g
            .iter()
            .zip(&lambda)
            .fold(0.0f64, |m, (g, l)| m.max(g.max(-l / mu).abs()));
        for (l, g) in lambda.iter_mut().zip(&eval.g) {
            *l = (*l + mu * g).max(0.0);
        }
        if kkt <= cfg.tolerance && !matches!(inner.status, InnerStatus::Budget) {
            message = "converged".into();
            break;
        }
        if matches!(inner.status, InnerStatus::Budget) || prob.rollouts >= cfg.rollout_budget {
            message = "rollout budget exhausted".into();
            break;
        }
        if violation < 0.99 * best_violation {
            best_violation = violation;
            stagnant = 0;
        } else {
            stagnant += 1;
        }
        if mu >= cfg.penalty_max && stagnant >= 3 && violation > cfg.tolerance {
            message = "stalled at maximum penalty".into();
            break;
        }
        if kkt > 0.25 * prev_v {
            mu = (mu * cfg.penalty_growth).min(cfg.penalty_max);
        }
        prev_v = kkt;
        if it < max_outer {
            eval = prob.evaluate(&v, true)?;
        }
    }
    Ok(Outcome {
        v,
        lambda,
        mu,
        iterations,
        trace,
        message,
    })
}

fn run<M: ProbabilisticDynamics>(
    members: &[M],
    x_t: &Vector,
    u_t: &Vector,
    cons: &Constraints<'_>,
    cfg: &CertifierConfig,
    warm: Option<&WarmStart>,
    soft: bool,
) -> Result<CertificationResult> {
    check_problem(members, x_t, u_t, cons, cfg)?;
    let (low, high) = action_box(cons.action)?;
    let k = &cfg.feedback;
    let kh = (0..cons.action.num_rows())
        .map(|j| k.transpose() * row_vec(cons.action, j))
        .collect();
    let mut prob = Problem {
        members,
        x_t,
        u_t,
        k,
        cons: *cons,
        horizon: cfg.horizon,
        n_x: x_t.len(),
        n_u: u_t.len(),
        eps: cfg.smoothing,
        kh,
        rollouts: 0,
    };
    let warm = if cfg.warm_start { warm } else { None };
    let v0 = initial_guess(u_t, &low, &high, cfg.horizon, warm);
    let m = prob.num_constraints();
    let (lambda0, mu0) = if soft {
        (vec![0.0; m], 2.0 * cfg.soft_penalty)
    } else {
        let lambda = warm
            .and_then(|w| w.multipliers.clone())
            .filter(|l| l.len() == m)
            .unwrap_or_else(|| vec![0.0; m]);
        let mu = warm.and_then(|w| w.penalty).unwrap_or(cfg.penalty_initial);
        (lambda, mu)
    };
    let mode = if soft { CertificationMode::Soft } else { CertificationMode::Hard };
    let outcome = solve(&mut prob, v0.clone(), lambda0, mu0, cfg, soft);
    let outcome = match outcome {
        Ok(o) => o,
        Err(_) => {
            let actions = prob.actions(&v0);
            let action = clip(u_t, &low, &high);
            return Ok(CertificationResult {
                feasible: false,
                action,
                policy: None,
                mode,
                diagnostics: SolverDiagnostics {
                    iterations: 0,
                    rollouts: prob.rollouts,
                    max_violation: f64::INFINITY,
                    objective: 0.0,
                    penalty: mu0,
                    trace: Vec::new(),
                    message: "non-finite tube rollout".into(),
                },
                bundle: None,
                warm_start: WarmStart {
                    actions,
                    multipliers: None,
                    penalty: None,
                },
            });
        }
    };
    let actions = prob.actions(&outcome.v);
    let (max_violation, bundle) = verify(members, x_t, &actions, k, cons);
    let feasible = max_violation <= cfg.tolerance;
    let diff = &actions[0] - u_t;
    let policy = bundle.as_ref().map(|b| policy_from(b, &actions, k, &low, &high));
    Ok(CertificationResult {
        feasible,
        action: clip(&actions[0], &low, &high),
        policy,
        mode,
        diagnostics: SolverDiagnostics {
            iterations: outcome.iterations,
            rollouts: prob.rollouts,
            max_violation,
            objective: diff.norm_squared(),
            penalty: outcome.mu,
            trace: outcome.trace,
            message: outcome.message,
        },
        bundle,
        warm_start: WarmStart {
            actions,
            multipliers: if soft { None } else { Some(outcome.lambda) },
            penalty: if soft { None } else { Some(outcome.mu) },
        },
    })
}

/// Minimal correction of `u_t` such that every member's tube satisfies the
/// state, tightened-action and terminal constraints.
pub fn certify<M: ProbabilisticDynamics>(
    members: &[M],
    x_t: &Vector,
    u_t: &Vector,
    constraints: &Constraints<'_>,
    cfg: &CertifierConfig,
    warm_start: Option<&WarmStart>,
) -> Result<CertificationResult> {
    run(members, x_t, u_t, constraints, cfg, warm_start, false)
}

/// Penalised variant `‖u_t − v_0‖² + ρ Σ max(0, g)²`; always yields an action.
pub fn soft_certify<M: ProbabilisticDynamics>(
    members: &[M],
    x_t: &Vector,
    u_t: &Vector,
    constraints: &Constraints<'_>,
    cfg: &CertifierConfig,
    warm_start: Option<&WarmStart>,
) -> Result<CertificationResult> {
    let mut soft_cfg = cfg.clone();
    soft_cfg.max_inner_iterations = cfg.max_inner_iterations.max(200);
    run(members, x_t, u_t, constraints, &soft_cfg, warm_start, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearGaussianModel;

    fn scalar_model(a: f64, b: f64, var: f64) -> LinearGaussianModel {
        LinearGaussianModel::new(
            Matrix::from_element(1, 1, a),
            Matrix::from_element(1, 1, b),
            Vector::from_element(1, var),
        )
    }

    fn boxes(x: f64, u: f64, term: f64) -> (Polytope, Polytope, Polytope) {
        (
            Polytope::from_box(&[-x], &[x]).unwrap(),
            Polytope::from_box(&[-u], &[u]).unwrap(),
            Polytope::from_box(&[-term], &[term]).unwrap(),
        )
    }

    fn seq() -> FeedbackPolicySequence {
        FeedbackPolicySequence {
            actions: (0..4).map(|i| Vector::from_element(1, i as f64 * 0.1)).collect(),
            states: (0..4).map(|i| Vector::from_row_slice(&[i as f64, 0.0])).collect(),
            feedback: Matrix::from_row_slice(1, 2, &[0.5, 0.5]),
            origin: 0,
            low: Vector::from_element(1, -1.0),
            high: Vector::from_element(1, 1.0),
        }
    }

    /// Linear mean with variance `c + (x·w)² + u²` per coordinate.
    struct Heteroscedastic {
        a: Matrix,
        b: Matrix,
        w: Vector,
    }

    impl ProbabilisticDynamics for Heteroscedastic {
        fn state_dim(&self) -> usize {
            self.a.nrows()
        }

        fn action_dim(&self) -> usize {
            self.b.ncols()
        }

        fn predict(&self, x: &Vector, u: &Vector) -> Result<(Vector, Vector)> {
            let l = self.linearize(x, u)?;
            Ok((l.mean, l.var))
        }

        fn linearize(&self, x: &Vector, u: &Vector) -> Result<crate::dynamics::Linearization> {
            let n = x.len();
            let s = x.dot(&self.w);
            let var = Vector::from_element(n, 1e-3 + s * s + u.norm_squared());
            let var_dx = Matrix::from_fn(n, n, |_, j| 2.0 * s * self.w[j]);
            let var_du = Matrix::from_fn(n, u.len(), |_, j| 2.0 * u[j]);
            Ok(crate::dynamics::Linearization {
                mean: &self.a * x + &self.b * u,
                var,
                a: self.a.clone(),
                b: self.b.clone(),
                var_dx,
                var_du,
            })
        }
    }

    #[test]
    fn tangent_gradient_matches_finite_differences() {
        let members = [Heteroscedastic {
            a: Matrix::from_row_slice(2, 2, &[1.0, 0.1, -0.2, 0.9]),
            b: Matrix::from_row_slice(2, 1, &[0.0, 0.3]),
            w: Vector::from_row_slice(&[0.4, -0.7]),
        }];
        let x = Polytope::from_box(&[-1.0, -2.0], &[1.0, 2.0]).unwrap();
        let u = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
        let t = Polytope::from_box(&[-0.5, -0.5], &[0.5, 0.5]).unwrap();
        let k = Matrix::from_row_slice(1, 2, &[0.5, 0.5]);
        let x_t = Vector::from_row_slice(&[0.3, -0.2]);
        let u_t = Vector::from_element(1, 0.1);
        let mut prob = Problem {
            members: &members,
            x_t: &x_t,
            u_t: &u_t,
            k: &k,
            cons: Constraints { state: &x, action: &u, terminal: &t },
            horizon: 4,
            n_x: 2,
            n_u: 1,
            eps: 1e-12,
            kh: (0..u.num_rows()).map(|j| k.transpose() * row_vec(&u, j)).collect(),
            rollouts: 0,
        };
        let v = vec![0.2, -0.3, 0.5, 0.1];
        let e = prob.evaluate(&v, true).unwrap();
        let d = v.len();
        let h = 1e-6;
        for dd in 0..d {
            let mut vp = v.clone();
            vp[dd] += h;
            let mut vm = v.clone();
            vm[dd] -= h;
            let ep = prob.evaluate(&vp, false).unwrap();
            let em = prob.evaluate(&vm, false).unwrap();
            for j in 0..e.g.len() {
                let fd = (ep.g[j] - em.g[j]) / (2.0 * h);
                let an = e.jac[j * d + dd];
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "row {j} dir {dd}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn warm_start_from_own_solution_converges_quickly() {
        let m = [scalar_model(1.0, 0.5, 1e-6)];
        let (x, u, t) = boxes(1.0, 1.0, 1.0);
        let cons = Constraints { state: &x, action: &u, terminal: &t };
        let cfg = CertifierConfig::with_fill(3, 1, 1, 0.0);
        let x0 = Vector::from_element(1, 0.8);
        let u0 = Vector::from_element(1, 1.0);
        let first = certify(&m, &x0, &u0, &cons, &cfg, None).unwrap();
        assert!(first.feasible);
        let again = certify(&m, &x0, &u0, &cons, &cfg, Some(&first.warm_start)).unwrap();
        assert!(again.feasible);
        assert!(again.diagnostics.iterations <= 3, "{:?}", again.diagnostics);
        assert!((again.action[0] - first.action[0]).abs() < 1e-5);
    }

    #[test]
    fn pendulum_push_towards_bound_is_damped() {
        use crate::dynamics::make_prior;
        use crate::envs::{EnvKind, EnvSpec};
        let spec = EnvSpec::new(EnvKind::Pendulum);
        let prior = make_prior(EnvKind::Pendulum, 0.0);
        let mut member = crate::dynamics::GaussianDynamicsModel::zeros(2, 1, &[8]).with_prior(Some(prior));
        let net = member.network_mut();
        let last = net.num_layers() - 1;
        net.bias_mut(last)[2..].fill(-14.0);
        let members = [member];
        let terminal = spec.state_polytope.clone();
        let cons = Constraints { state: &spec.state_polytope, action: &spec.action_polytope, terminal: &terminal };
        let cfg = CertifierConfig::with_fill(5, 1, 2, 0.0);
        let x0 = Vector::from_row_slice(&[25.0 * std::f64::consts::PI / 12.0 - 0.06, 0.5]);
        let push = Vector::from_element(1, 1.0);
        let r = certify(&members, &x0, &push, &cons, &cfg, None).unwrap();
        assert!(r.feasible, "{:?}", r.diagnostics);
        assert!(r.action[0] < push[0] - 1e-3);
    }

    #[test]
    fn fallback_on_nominal_state_returns_nominal_action() {
        let s = seq();
        let (u, next) = fallback_action(&s, &Vector::from_row_slice(&[1.0, 0.0]));
        assert_eq!(u, Vector::from_element(1, 0.1));
        assert_eq!(next.len(), 3);
        let (u, _) = fallback_action(&s, &Vector::from_row_slice(&[1.2, 0.2]));
        assert!((u[0] - 0.3).abs() < 1e-15);
        let (u, _) = fallback_action(&s, &Vector::from_row_slice(&[5.0, 0.0]));
        assert_eq!(u[0], 1.0);
    }

    #[test]
    fn fallback_exhausts_to_last_stage() {
        let mut s = seq();
        for _ in 0..3 {
            s = fallback_action(&s, &Vector::zeros(2)).1;
        }
        assert_eq!(s.len(), 1);
        let x = Vector::from_row_slice(&[3.0, 0.0]);
        let (u1, s1) = fallback_action(&s, &x);
        let (u2, _) = fallback_action(&s1, &x);
        assert_eq!(s1.len(), 1);
        assert!((u1[0] - 0.3).abs() < 1e-15);
        assert_eq!(u1, u2);
    }

    #[test]
    fn trivially_safe_instance_keeps_action() {
        let m = [scalar_model(0.9, 0.1, 1e-4)];
        let (x, u, t) = boxes(100.0, 1.0, 100.0);
        let cons = Constraints { state: &x, action: &u, terminal: &t };
        let cfg = CertifierConfig::with_fill(5, 1, 1, 0.0);
        let r = certify(&m, &Vector::from_element(1, 0.3), &Vector::from_element(1, 0.4), &cons, &cfg, None).unwrap();
        assert!(r.feasible);
        assert!((r.action[0] - 0.4).abs() <= 1e-3);
        assert_eq!(r.diagnostics.iterations, 1);
    }

    #[test]
    fn unreachable_terminal_set_is_infeasible() {
        let m = [scalar_model(1.0, 0.1, 1e-6)];
        let x = Polytope::from_box(&[-100.0], &[100.0]).unwrap();
        let u = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
        let t = Polytope::from_box(&[50.0], &[51.0]).unwrap();
        let cons = Constraints { state: &x, action: &u, terminal: &t };
        let cfg = CertifierConfig::with_fill(3, 1, 1, 0.0);
        let r = certify(&m, &Vector::zeros(1), &Vector::zeros(1), &cons, &cfg, None).unwrap();
        assert!(!r.feasible);
        assert!(r.diagnostics.max_violation > cfg.tolerance);
    }

    #[test]
    fn intervention_when_action_is_unsafe() {
        // x' = x + 0.5 u; from x = 0.8 pushing with u = 1 leaves |x| ≤ 1.
        let m = [scalar_model(1.0, 0.5, 1e-6)];
        let (x, u, t) = boxes(1.0, 1.0, 1.0);
        let cons = Constraints { state: &x, action: &u, terminal: &t };
        let cfg = CertifierConfig::with_fill(3, 1, 1, 0.0);
        let r = certify(&m, &Vector::from_element(1, 0.8), &Vector::from_element(1, 1.0), &cons, &cfg, None).unwrap();
        assert!(r.feasible, "{:?}", r.diagnostics);
        // Largest admissible v₀ keeps 0.8 + 0.5 v₀ + √1e-6 ≤ 1.
        let expected = (1.0 - 0.8 - 1e-3) / 0.5;
        assert!((r.action[0] - expected).abs() < 1e-4, "{}", r.action[0]);
        assert!(r.diagnostics.max_violation <= 1e-6);
    }

    #[test]
    fn soft_matches_hard_on_feasible_instance() {
        let m = [scalar_model(1.0, 0.5, 1e-6)];
        let (x, u, t) = boxes(1.0, 1.0, 1.0);
        let cons = Constraints { state: &x, action: &u, terminal: &t };
        let cfg = CertifierConfig::with_fill(3, 1, 1, 0.0);
        let x0 = Vector::from_element(1, 0.5);
        let u0 = Vector::from_element(1, 0.3);
        let hard = certify(&m, &x0, &u0, &cons, &cfg, None).unwrap();
        let soft = soft_certify(&m, &x0, &u0, &cons, &cfg, None).unwrap();
        assert_eq!(soft.mode, CertificationMode::Soft);
        assert!((hard.action[0] - soft.action[0]).abs() <= 1e-3);
    }

    #[test]
    fn trace_rows_are_recorded() {
        let m = [scalar_model(1.0, 0.5, 1e-6)];
        let (x, u, t) = boxes(1.0, 1.0, 1.0);
        let cons = Constraints { state: &x, action: &u, terminal: &t };
        let mut cfg = CertifierConfig::with_fill(3, 1, 1, 0.0);
        cfg.record_trace = true;
        let r = certify(&m, &Vector::from_element(1, 0.8), &Vector::from_element(1, 1.0), &cons, &cfg, None).unwrap();
        assert_eq!(r.diagnostics.trace.len(), r.diagnostics.iterations);
        let path = std::env::temp_dir().join(format!("tubecert-trace-{}.csv", std::process::id()));
        write_trace_csv(&r.diagnostics.trace, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        assert!(text.starts_with("iteration,objective,max_violation,penalty\n"));
        assert_eq!(text.lines().count(), r.diagnostics.trace.len() + 1);
    }
}
