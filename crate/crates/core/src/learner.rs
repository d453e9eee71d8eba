//! Reduced model-based soft actor-critic: a tanh-squashed Gaussian policy,
//! clipped double critics with Polyak-averaged targets, behaviour-cloning
//! pre-training and short ensemble rollouts for synthetic data.
//!
//! The learner never sees constraint sets; it only proposes actions.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ReplayRing, Transition, TransitionDataset};
use crate::dynamics::{soft_clamp_log_var, ProbabilisticDynamics};
use crate::error::check_dim;
use crate::nn::{Activation, Adam, ForwardCache, Mlp};
use crate::{Error, Matrix, Result, Vector};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const POLICY_CHECKPOINT_VERSION: u32 = 1;
/// Minimum dataset size for behaviour cloning.
pub const MIN_PRETRAIN_ROWS: usize = 1000;
const SQUASH_EPS: f64 = 1e-6;
const HALF_LN_TAU: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub entropy_weight: f64,
    pub batch_size: usize,
    /// Fraction of each minibatch drawn from real data.
    pub real_ratio: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            hidden: vec![100, 100],
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            gamma: 0.99,
            tau: 0.005,
            entropy_weight: 0.05,
            batch_size: 256,
            real_ratio: 0.1,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("learner hidden layers must be non-empty");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("discount must lie in [0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("target rate must lie in (0, 1]");
        }
        if !(self.entropy_weight >= 0.0) {
            return bad("entropy weight must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..=1.0).contains(&self.real_ratio) {
            return bad("real ratio must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Real rows in a minibatch of `batch`, rounding half up.
pub fn real_rows(batch: usize, real_ratio: f64) -> usize {
    ((real_ratio * batch as f64 + 0.5).floor() as usize).min(batch)
}

/// State → (mean, log-std) network squashed into the action box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    net: Mlp,
    low: Vector,
    high: Vector,
    /// Multiplies the standard deviation when acting; 0 acts deterministically.
    exploration: f64,
}

struct PolicySample {
    cache: ForwardCache,
    actions: Matrix,
    logp: Vec<f64>,
    xi: Matrix,
    tanh: Matrix,
    sigma: Matrix,
    ls_deriv: Matrix,
}

impl GaussianPolicy {
    fn sizes(n_x: usize, n_u: usize, hidden: &[usize]) -> Vec<usize> {
        let mut s = vec![n_x];
        s.extend_from_slice(hidden);
        s.push(2 * n_u);
        s
    }

    fn check_box(low: &Vector, high: &Vector) -> Result<()> {
        check_dim("policy action bounds", low.len(), high.len())?;
        if low.iter().zip(high.iter()).any(|(l, h)| !(l < h)) {
            return Err(Error::InvalidArgument("action bounds must satisfy low < high".into()));
        }
        Ok(())
    }

    pub fn zeros(n_x: usize, low: Vector, high: Vector, hidden: &[usize]) -> Result<Self> {
        Self::check_box(&low, &high)?;
        Ok(Self {
            net: Mlp::zeros(&Self::sizes(n_x, low.len(), hidden), Activation::Relu),
            low,
            high,
            exploration: 1.0,
        })
    }

    pub fn new<R: Rng + ?Sized>(n_x: usize, low: Vector, high: Vector, hidden: &[usize], rng: &mut R) -> Result<Self> {
        Self::check_box(&low, &high)?;
        Ok(Self {
            net: Mlp::new(&Self::sizes(n_x, low.len(), hidden), Activation::Relu, rng),
            low,
            high,
            exploration: 1.0,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.low.len()
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn bounds(&self) -> (&Vector, &Vector) {
        (&self.low, &self.high)
    }

    pub fn exploration(&self) -> f64 {
        self.exploration
    }

    pub fn set_exploration(&mut self, scale: f64) {
        self.exploration = scale.clamp(0.0, 1.0);
    }

    fn center(&self, i: usize) -> f64 {
        0.5 * (self.low[i] + self.high[i])
    }

    fn half(&self, i: usize) -> f64 {
        0.5 * (self.high[i] - self.low[i])
    }

    fn squash(&self, i: usize, pre: f64) -> f64 {
        (self.center(i) + self.half(i) * pre.tanh()).clamp(self.low[i], self.high[i])
    }

    pub fn mean_action(&self, x: &Vector) -> Vector {
        let out = self.net.forward_one(x);
        Vector::from_fn(self.action_dim(), |i, _| self.squash(i, out[i]))
    }

    pub fn log_std(&self, x: &Vector) -> Vector {
        let out = self.net.forward_one(x);
        let n = self.action_dim();
        Vector::from_fn(n, |i, _| soft_clamp_log_var(out[n + i], LOG_STD_MIN, LOG_STD_MAX).0)
    }

    /// A draw from the squashed Gaussian, or its mode when `deterministic`.
    pub fn sample_action<R: Rng + ?Sized>(&self, x: &Vector, deterministic: bool, rng: &mut R) -> Vector {
        let out = self.net.forward_one(x);
        let n = self.action_dim();
        Vector::from_fn(n, |i, _| {
            let mut pre = out[i];
            if !deterministic && self.exploration > 0.0 {
                let ls = soft_clamp_log_var(out[n + i], LOG_STD_MIN, LOG_STD_MAX).0;
                let xi: f64 = rng.sample(StandardNormal);
                pre += self.exploration * ls.exp() * xi;
            }
            self.squash(i, pre)
        })
    }

    /// Reparameterised batch draw with log-densities in action space.
    fn sample_batch<R: Rng + ?Sized>(&self, states: &Matrix, rng: &mut R) -> PolicySample {
        let cache = self.net.forward_cached(states);
        let out = cache.output();
        let (n, b) = (self.action_dim(), states.ncols());
        let mut actions = Matrix::zeros(n, b);
        let mut xi = Matrix::zeros(n, b);
        let mut tanh = Matrix::zeros(n, b);
        let mut sigma = Matrix::zeros(n, b);
        let mut ls_deriv = Matrix::zeros(n, b);
        let mut logp = vec![0.0; b];
        for j in 0..b {
            for i in 0..n {
                let (ls, d) = soft_clamp_log_var(out[(n + i, j)], LOG_STD_MIN, LOG_STD_MAX);
                let s = ls.exp();
                let e: f64 = rng.sample(StandardNormal);
                let t = (out[(i, j)] + s * e).tanh();
                let h = self.half(i);
                actions[(i, j)] = (self.center(i) + h * t).clamp(self.low[i], self.high[i]);
                xi[(i, j)] = e;
                tanh[(i, j)] = t;
                sigma[(i, j)] = s;
                ls_deriv[(i, j)] = d;
                logp[j] += -0.5 * e * e - ls - HALF_LN_TAU - (h * (1.0 - t * t) + SQUASH_EPS).ln();
            }
        }
        PolicySample {
            cache,
            actions,
            logp,
            xi,
            tanh,
            sigma,
            ls_deriv,
        }
    }
}

fn critic_sizes(n_x: usize, n_u: usize, hidden: &[usize]) -> Vec<usize> {
    let mut s = vec![n_x + n_u];
    s.extend_from_slice(hidden);
    s.push(1);
    s
}

fn stack_rows(top: &Matrix, bottom: &Matrix) -> Matrix {
    let mut m = Matrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    m.rows_mut(0, top.nrows()).copy_from(top);
    m.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub critic_loss: f64,
    pub actor_loss: f64,
    /// Mean `−log π(a|x)` over the last batch.
    pub entropy: f64,
    pub updates: usize,
}

struct Batch {
    x: Matrix,
    u: Matrix,
    r: Vec<f64>,
    x_next: Matrix,
    done: Vec<bool>,
}

fn draw_batch<R: Rng + ?Sized>(
    real: &TransitionDataset,
    synthetic: &ReplayRing,
    batch: usize,
    ratio: f64,
    rng: &mut R,
) -> Batch {
    let n_real = if synthetic.is_empty() { batch } else { real_rows(batch, ratio) };
    let (n_x, n_u) = (real.state_dim(), real.action_dim());
    let mut out = Batch {
        x: Matrix::zeros(n_x, batch),
        u: Matrix::zeros(n_u, batch),
        r: vec![0.0; batch],
        x_next: Matrix::zeros(n_x, batch),
        done: vec![false; batch],
    };
    for j in 0..batch {
        let t: &Transition = if j < n_real {
            real.get(rng.random_range(0..real.len()))
        } else {
            synthetic.get(rng.random_range(0..synthetic.len()))
        };
        out.x.column_mut(j).copy_from_slice(&t.x);
        out.u.column_mut(j).copy_from_slice(&t.u);
        out.x_next.column_mut(j).copy_from_slice(&t.x_next);
        out.r[j] = t.r;
        out.done[j] = t.done;
    }
    out
}

/// Policy, twin critics, their targets and optimiser states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub policy: GaussianPolicy,
    q1: Mlp,
    q2: Mlp,
    q1_target: Mlp,
    q2_target: Mlp,
    actor_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
    config: LearnerConfig,
    updates: u64,
}

#[derive(Serialize, Deserialize)]
struct PolicyCheckpoint {
    version: u32,
    state: ActorCritic,
}

impl ActorCritic {
    pub fn new<R: Rng + ?Sized>(n_x: usize, low: Vector, high: Vector, config: LearnerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let n_u = low.len();
        let policy = GaussianPolicy::new(n_x, low, high, &config.hidden, rng)?;
        let sizes = critic_sizes(n_x, n_u, &config.hidden);
        let q1 = Mlp::new(&sizes, Activation::Relu, rng);
        let q2 = Mlp::new(&sizes, Activation::Relu, rng);
        Ok(Self {
            actor_opt: Adam::new(policy.net.num_params(), config.actor_lr),
            q1_opt: Adam::new(q1.num_params(), config.critic_lr),
            q2_opt: Adam::new(q2.num_params(), config.critic_lr),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy,
            q1,
            q2,
            config,
            updates: 0,
        })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn num_updates(&self) -> u64 {
        self.updates
    }

    /// Both critic estimates at one state-action pair.
    pub fn q_values(&self, x: &Vector, u: &Vector) -> (f64, f64) {
        let inp = Vector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied());
        (self.q1.forward_one(&inp)[0], self.q2.forward_one(&inp)[0])
    }

    /// Behaviour cloning of the dataset's actions by the policy mean. Returns
    /// the full-data loss before training followed by one value per epoch.
    pub fn pretrain<R: Rng + ?Sized>(&mut self, data: &TransitionDataset, epochs: usize, rng: &mut R) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if data.len() < MIN_PRETRAIN_ROWS {
            return Err(Error::InsufficientData {
                needed: MIN_PRETRAIN_ROWS,
                got: data.len(),
            });
        }
        check_dim("pretrain state", self.policy.state_dim(), data.state_dim())?;
        check_dim("pretrain action", self.policy.action_dim(), data.action_dim())?;
        let full = data.to_batch()?;
        let mut opt = Adam::new(self.policy.net.num_params(), self.config.actor_lr);
        let mut history = vec![self.clone_loss(&full.x, &full.u)];
        let n = data.len();
        let bs = self.config.batch_size.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..epochs {
            for i in (1..n).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            for chunk in order.chunks(bs) {
                let sel = full.select(chunk);
                let (_, grad) = self.clone_loss_grad(&sel.x, &sel.u);
                opt.step(self.policy.net.params_mut(), &grad);
            }
            history.push(self.clone_loss(&full.x, &full.u));
        }
        Ok(history)
    }

    fn clone_loss(&self, x: &Matrix, u: &Matrix) -> f64 {
        let out = self.policy.net.forward(x);
        let mut loss = 0.0;
        for j in 0..x.ncols() {
            for i in 0..u.nrows() {
                let d = self.policy.squash(i, out[(i, j)]) - u[(i, j)];
                loss += d * d;
            }
        }
        loss / x.ncols() as f64
    }

    fn clone_loss_grad(&self, x: &Matrix, u: &Matrix) -> (f64, Vec<f64>) {
        let cache = self.policy.net.forward_cached(x);
        let out = cache.output();
        let b = x.ncols() as f64;
        let mut g = Matrix::zeros(out.nrows(), out.ncols());
        let mut loss = 0.0;
        for j in 0..x.ncols() {
            for i in 0..u.nrows() {
                let t = out[(i, j)].tanh();
                let h = self.policy.half(i);
                let d = self.policy.center(i) + h * t - u[(i, j)];
                loss += d * d;
                g[(i, j)] = 2.0 * d * h * (1.0 - t * t) / b;
            }
        }
        let (grad, _) = self.policy.net.backward(&cache, &g);
        (loss / b, grad)
    }

    /// `updates` gradient steps on minibatches mixing real and synthetic rows.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        real: &TransitionDataset,
        synthetic: &ReplayRing,
        updates: usize,
        rng: &mut R,
    ) -> Result<UpdateMetrics> {
        if real.is_empty() {
            return Err(Error::EmptyBatch);
        }
        check_dim("learner state", self.policy.state_dim(), real.state_dim())?;
        check_dim("learner action", self.policy.action_dim(), real.action_dim())?;
        let mut m = UpdateMetrics {
            critic_loss: 0.0,
            actor_loss: 0.0,
            entropy: 0.0,
            updates: 0,
        };
        for _ in 0..updates {
            let batch = draw_batch(real, synthetic, self.config.batch_size, self.config.real_ratio, rng);
            m.critic_loss = self.critic_step(&batch, rng);
            let (actor_loss, entropy) = self.actor_step(&batch.x, rng);
            m.actor_loss = actor_loss;
            m.entropy = entropy;
            self.q1_target.soft_update_from(&self.q1, self.config.tau);
            self.q2_target.soft_update_from(&self.q2, self.config.tau);
            self.updates += 1;
            m.updates += 1;
        }
        Ok(m)
    }

    fn critic_step<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> f64 {
        let b = batch.x.ncols();
        let alpha = self.config.entropy_weight;
        let next = self.policy.sample_batch(&batch.x_next, rng);
        let inp_next = stack_rows(&batch.x_next, &next.actions);
        let t1 = self.q1_target.forward(&inp_next);
        let t2 = self.q2_target.forward(&inp_next);
        let y: Vec<f64> = (0..b)
            .map(|j| {
                let cont = if batch.done[j] { 0.0 } else { 1.0 };
                batch.r[j] + self.config.gamma * cont * (t1[(0, j)].min(t2[(0, j)]) - alpha * next.logp[j])
            })
            .collect();
        let inp = stack_rows(&batch.x, &batch.u);
        let mut total = 0.0;
        for (net, opt) in [(&mut self.q1, &mut self.q1_opt), (&mut self.q2, &mut self.q2_opt)] {
            let cache = net.forward_cached(&inp);
            let q = cache.output();
            let mut g = Matrix::zeros(1, b);
            for j in 0..b {
                let d = q[(0, j)] - y[j];
                total += d * d / b as f64;
                g[(0, j)] = 2.0 * d / b as f64;
            }
            let (grad, _) = net.backward(&cache, &g);
            opt.step(net.params_mut(), &grad);
        }
        0.5 * total
    }

    fn actor_step<R: Rng + ?Sized>(&mut self, states: &Matrix, rng: &mut R) -> (f64, f64) {
        let (n_x, n_u, b) = (states.nrows(), self.policy.action_dim(), states.ncols());
        let alpha = self.config.entropy_weight;
        let s = self.policy.sample_batch(states, rng);
        let inp = stack_rows(states, &s.actions);
        let c1 = self.q1.forward_cached(&inp);
        let c2 = self.q2.forward_cached(&inp);
        let mut g1 = Matrix::zeros(1, b);
        let mut g2 = Matrix::zeros(1, b);
        let mut loss = 0.0;
        let mut entropy = 0.0;
        for j in 0..b {
            let (q1, q2) = (c1.output()[(0, j)], c2.output()[(0, j)]);
            if q1 <= q2 {
                g1[(0, j)] = 1.0;
            } else {
                g2[(0, j)] = 1.0;
            }
            loss += (alpha * s.logp[j] - q1.min(q2)) / b as f64;
            entropy -= s.logp[j] / b as f64;
        }
        let (_, dq1) = self.q1.backward(&c1, &g1);
        let (_, dq2) = self.q2.backward(&c2, &g2);
        let dq_da = dq1.rows(n_x, n_u) + dq2.rows(n_x, n_u);
        let mut g = Matrix::zeros(2 * n_u, b);
        for j in 0..b {
            for i in 0..n_u {
                let t = s.tanh[(i, j)];
                let h = self.policy.half(i);
                let jac = h * (1.0 - t * t);
                let dlogp_dpre = 2.0 * t * jac / (jac + SQUASH_EPS);
                let dl_dpre = (alpha * dlogp_dpre - dq_da[(i, j)] * jac) / b as f64;
                let dl_dls = -alpha / b as f64 + dl_dpre * s.sigma[(i, j)] * s.xi[(i, j)];
                g[(i, j)] = dl_dpre;
                g[(n_u + i, j)] = dl_dls * s.ls_deriv[(i, j)];
            }
        }
        let (grad, _) = self.policy.net.backward(&s.cache, &g);
        self.actor_opt.step(self.policy.net.params_mut(), &grad);
        (loss, entropy)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = PolicyCheckpoint {
            version: POLICY_CHECKPOINT_VERSION,
            state: self.clone(),
        };
        fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: PolicyCheckpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ck.version != POLICY_CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion(ck.version));
        }
        Ok(ck.state)
    }
}

/// Appends up to `count · rollout_len` synthetic transitions. Each rollout
/// starts at a uniformly drawn real state and, per step, samples a member
/// uniformly and the next state from its Gaussian. A rollout stops early if a
/// prediction is non-finite. Returns the number appended.
#[allow(clippy::too_many_arguments)]
pub fn generate_model_rollouts<M: ProbabilisticDynamics, R: Rng + ?Sized>(
    members: &[M],
    policy: &GaussianPolicy,
    real: &TransitionDataset,
    rollout_len: usize,
    count: usize,
    reward: &dyn Fn(&Vector, &Vector) -> f64,
    out: &mut ReplayRing,
    rng: &mut R,
) -> Result<usize> {
    if members.is_empty() || real.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut appended = 0;
    for _ in 0..count {
        let mut x = real.get(rng.random_range(0..real.len())).state();
        for step in 0..rollout_len {
            let u = policy.sample_action(&x, false, rng);
            let model = &members[rng.random_range(0..members.len())];
            let (mean, var) = model.predict(&x, &u)?;
            let next = Vector::from_fn(mean.len(), |i, _| {
                let e: f64 = rng.sample(StandardNormal);
                mean[i] + var[i].max(0.0).sqrt() * e
            });
            if next.iter().any(|v| !v.is_finite()) {
                break;
            }
            let mut t = Transition::new(&x, &u, &next, reward(&next, &u));
            t.t = step;
            out.push(t)?;
            appended += 1;
            x = next;
        }
    }
    Ok(appended)
}
