//! Gaussian MLP dynamics models with a diagonal variance head, bootstrapped
//! ensembles, negative log-likelihood training, and physics priors.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvKind, EnvParams, EnvSpec};
use crate::error::check_dim;
use crate::nn::{Activation, Adam, Mlp};
use crate::{Error, Matrix, Result, Vector};

pub const LOG_VAR_MIN: f64 = -18.420680743952367; // ln 1e-8
pub const LOG_VAR_MAX: f64 = 4.605170185988092; // ln 1e2
pub const CHECKPOINT_VERSION: u32 = 1;
const STD_FLOOR: f64 = 1e-6;
const PRIOR_FD_STEP: f64 = 1e-5;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smooth two-sided clamp of a log-variance and its derivative.
pub fn soft_clamp_log_var(l: f64, lo: f64, hi: f64) -> (f64, f64) {
    let upper = hi - softplus(hi - l);
    let d_upper = sigmoid(hi - l);
    let value = lo + softplus(upper - lo);
    // The composition overshoots `hi` by at most e^{lo-hi}; pin it.
    (value.min(hi), sigmoid(upper - lo) * d_upper)
}

/// Mean first-order quantities of a model at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub mean: Vector,
    /// Diagonal of the predicted covariance.
    pub var: Vector,
    /// `∂mean/∂x` (`n_x × n_x`).
    pub a: Matrix,
    /// `∂mean/∂u` (`n_x × n_u`).
    pub b: Matrix,
    /// `∂var/∂x` (`n_x × n_x`).
    pub var_dx: Matrix,
    /// `∂var/∂u` (`n_x × n_u`).
    pub var_du: Matrix,
}

/// One-step probabilistic dynamics `x' ~ N(mean(x, u), diag(var(x, u)))`.
pub trait ProbabilisticDynamics: Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn predict(&self, x: &Vector, u: &Vector) -> Result<(Vector, Vector)>;
    fn linearize(&self, x: &Vector, u: &Vector) -> Result<Linearization>;

    fn jacobians(&self, x: &Vector, u: &Vector) -> Result<(Matrix, Matrix)> {
        let lin = self.linearize(x, u)?;
        Ok((lin.a, lin.b))
    }
}

fn check_inputs(n_x: usize, n_u: usize, x: &Vector, u: &Vector) -> Result<()> {
    check_dim("model state input", n_x, x.len())?;
    check_dim("model action input", n_u, u.len())?;
    if x.iter().chain(u.iter()).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("model input"))
    }
}

/// Exact linear-Gaussian model `x' = A x + B u + c`, constant diagonal variance.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianModel {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Vector,
    pub var: Vector,
}

impl LinearGaussianModel {
    pub fn new(a: Matrix, b: Matrix, var: Vector) -> Self {
        let n = a.nrows();
        Self {
            a,
            b,
            c: Vector::zeros(n),
            var,
        }
    }
}

impl ProbabilisticDynamics for LinearGaussianModel {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    fn predict(&self, x: &Vector, u: &Vector) -> Result<(Vector, Vector)> {
        check_inputs(self.state_dim(), self.action_dim(), x, u)?;
        Ok((&self.a * x + &self.b * u + &self.c, self.var.clone()))
    }

    fn linearize(&self, x: &Vector, u: &Vector) -> Result<Linearization> {
        let (mean, var) = self.predict(x, u)?;
        let n = self.state_dim();
        Ok(Linearization {
            mean,
            var,
            a: self.a.clone(),
            b: self.b.clone(),
            var_dx: Matrix::zeros(n, n),
            var_du: Matrix::zeros(n, self.action_dim()),
        })
    }
}

/// Disturbance-free step of a task with every physical parameter scaled by
/// `1 + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub base: EnvParams,
    pub offset: f64,
    pub dt: f64,
}

impl Prior {
    pub fn from_params(base: EnvParams, offset: f64, dt: f64) -> Self {
        Self { base, offset, dt }
    }

    pub fn kind(&self) -> EnvKind {
        self.base.kind()
    }

    pub fn params(&self) -> EnvParams {
        self.base.scaled(1.0 + self.offset)
    }

    /// Actions are not clipped so the map stays smooth at the bounds.
    pub fn step(&self, x: &Vector, u: &Vector) -> Vector {
        EnvSpec::integrate_with(&self.params(), x, u, self.dt)
    }

    /// Central finite-difference Jacobians.
    pub fn jacobians(&self, x: &Vector, u: &Vector) -> (Matrix, Matrix) {
        let params = self.params();
        let h = PRIOR_FD_STEP;
        let n_x = x.len();
        let mut a = Matrix::zeros(n_x, n_x);
        let mut xp = x.clone();
        for j in 0..n_x {
            let orig = xp[j];
            xp[j] = orig + h;
            let fp = EnvSpec::integrate_with(&params, &xp, u, self.dt);
            xp[j] = orig - h;
            let fm = EnvSpec::integrate_with(&params, &xp, u, self.dt);
            xp[j] = orig;
            a.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        let mut b = Matrix::zeros(n_x, u.len());
        let mut up = u.clone();
        for j in 0..u.len() {
            let orig = up[j];
            up[j] = orig + h;
            let fp = EnvSpec::integrate_with(&params, x, &up, self.dt);
            up[j] = orig - h;
            let fm = EnvSpec::integrate_with(&params, x, &up, self.dt);
            up[j] = orig;
            b.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        (a, b)
    }
}

/// Prior built from a task's default parameters.
pub fn make_prior(kind: EnvKind, offset: f64) -> Prior {
    Prior::from_params(EnvParams::defaults(kind), offset, crate::envs::DEFAULT_DT)
}

/// What the network's mean head is added to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// The network predicts `x'` directly.
    Absolute,
    /// The network predicts `x' − x`.
    Delta,
}

/// Per-dimension standardisation statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

fn mean_std(m: &Matrix, weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let wsum: f64 = weights.iter().sum();
    let mut mean = vec![0.0; m.nrows()];
    let mut std = vec![0.0; m.nrows()];
    for i in 0..m.nrows() {
        let mu = m.row(i).iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / wsum;
        let var = m
            .row(i)
            .iter()
            .zip(weights)
            .map(|(v, w)| w * (v - mu) * (v - mu))
            .sum::<f64>()
            / wsum;
        mean[i] = mu;
        std[i] = if var.sqrt() < STD_FLOOR { 1.0 } else { var.sqrt() };
    }
    (mean, std)
}

impl Normalizer {
    pub fn identity(n_in: usize, n_out: usize) -> Self {
        Self {
            input_mean: vec![0.0; n_in],
            input_std: vec![1.0; n_in],
            target_mean: vec![0.0; n_out],
            target_std: vec![1.0; n_out],
        }
    }
}

/// Column-stacked `(x, u, x')` training rows with per-row weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub x: Matrix,
    pub u: Matrix,
    pub x_next: Matrix,
    pub weights: Vec<f64>,
}

impl TransitionBatch {
    pub fn new(x: Matrix, u: Matrix, x_next: Matrix) -> Result<Self> {
        let n = x.ncols();
        Self::with_weights(x, u, x_next, vec![1.0; n])
    }

    pub fn with_weights(x: Matrix, u: Matrix, x_next: Matrix, weights: Vec<f64>) -> Result<Self> {
        let n = x.ncols();
        check_dim("batch actions", n, u.ncols())?;
        check_dim("batch next states", n, x_next.ncols())?;
        check_dim("batch weights", n, weights.len())?;
        check_dim("batch next-state dimension", x.nrows(), x_next.nrows())?;
        let finite = x
            .iter()
            .chain(u.iter())
            .chain(x_next.iter())
            .chain(weights.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("transition batch"));
        }
        Ok(Self {
            x,
            u,
            x_next,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_columns(idx),
            u: self.u.select_columns(idx),
            x_next: self.x_next.select_columns(idx),
            weights: idx.iter().map(|&i| self.weights[i]).collect(),
        }
    }
}

/// Gaussian negative log-likelihood of one row with diagonal variance:
/// `rᵀ diag(var)⁻¹ r + ln det diag(var)`.
pub fn gaussian_nll(residual: &Vector, var: &Vector) -> f64 {
    residual
        .iter()
        .zip(var.iter())
        .map(|(r, v)| r * r / v + v.ln())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDynamicsModel {
    n_x: usize,
    n_u: usize,
    net: Mlp,
    norm: Normalizer,
    target_mode: TargetMode,
    log_var_min: f64,
    log_var_max: f64,
    prior: Option<Prior>,
}

/// Hidden layer widths used for a task's ensemble members.
pub fn default_hidden(kind: EnvKind) -> [usize; 2] {
    match kind {
        EnvKind::Pendulum | EnvKind::CartPole => [10, 10],
        EnvKind::TwoLinkArm | EnvKind::Drone => [20, 20],
    }
}

struct Forward {
    /// Normalised mean head (`n_x × B`).
    mean_n: Matrix,
    /// Clamped physical log-variance (`n_x × B`).
    log_var: Matrix,
    /// Derivative of the clamp.
    clamp_grad: Matrix,
}

impl GaussianDynamicsModel {
    pub fn new<R: Rng + ?Sized>(n_x: usize, n_u: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![n_x + n_u];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * n_x);
        Self {
            n_x,
            n_u,
            net: Mlp::new(&sizes, Activation::Tanh, rng),
            norm: Normalizer::identity(n_x + n_u, n_x),
            target_mode: TargetMode::Delta,
            log_var_min: LOG_VAR_MIN,
            log_var_max: LOG_VAR_MAX,
            prior: None,
        }
    }

    /// All-zero network predicting absolute next states.
    pub fn zeros(n_x: usize, n_u: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![n_x + n_u];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * n_x);
        Self {
            n_x,
            n_u,
            net: Mlp::zeros(&sizes, Activation::Tanh),
            norm: Normalizer::identity(n_x + n_u, n_x),
            target_mode: TargetMode::Absolute,
            log_var_min: LOG_VAR_MIN,
            log_var_max: LOG_VAR_MAX,
            prior: None,
        }
    }

    pub fn with_prior(mut self, prior: Option<Prior>) -> Self {
        self.prior = prior;
        self
    }

    pub fn with_target_mode(mut self, mode: TargetMode) -> Self {
        self.target_mode = mode;
        self
    }

    pub fn with_network(mut self, net: Mlp) -> Result<Self> {
        check_dim("network input", self.n_x + self.n_u, net.input_dim())?;
        check_dim("network output", 2 * self.n_x, net.output_dim())?;
        self.net = net;
        Ok(self)
    }

    pub fn prior(&self) -> Option<&Prior> {
        self.prior.as_ref()
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    pub fn set_normalizer(&mut self, norm: Normalizer) -> Result<()> {
        check_dim("normalizer inputs", self.n_x + self.n_u, norm.input_mean.len())?;
        check_dim("normalizer targets", self.n_x, norm.target_mean.len())?;
        self.norm = norm;
        Ok(())
    }

    pub fn target_mode(&self) -> TargetMode {
        self.target_mode
    }

    pub fn log_var_bounds(&self) -> (f64, f64) {
        (self.log_var_min, self.log_var_max)
    }

    /// `x' − base(x, u)` is what the network models.
    fn base(&self, x: &Vector, u: &Vector) -> Vector {
        match (&self.prior, self.target_mode) {
            (Some(p), _) => p.step(x, u),
            (None, TargetMode::Delta) => x.clone(),
            (None, TargetMode::Absolute) => Vector::zeros(self.n_x),
        }
    }

    fn base_batch(&self, x: &Matrix, u: &Matrix) -> Matrix {
        match (&self.prior, self.target_mode) {
            (None, TargetMode::Delta) => x.clone(),
            (None, TargetMode::Absolute) => Matrix::zeros(self.n_x, x.ncols()),
            (Some(_), _) => {
                let mut out = Matrix::zeros(self.n_x, x.ncols());
                for j in 0..x.ncols() {
                    let b = self.base(&x.column(j).into_owned(), &u.column(j).into_owned());
                    out.set_column(j, &b);
                }
                out
            }
        }
    }

    fn normalized_inputs(&self, x: &Matrix, u: &Matrix) -> Matrix {
        let n_in = self.n_x + self.n_u;
        let mut z = Matrix::zeros(n_in, x.ncols());
        for j in 0..x.ncols() {
            for i in 0..n_in {
                let v = if i < self.n_x { x[(i, j)] } else { u[(i - self.n_x, j)] };
                z[(i, j)] = (v - self.norm.input_mean[i]) / self.norm.input_std[i];
            }
        }
        z
    }

    fn heads(&self, out: &Matrix) -> Forward {
        let n = self.n_x;
        let b = out.ncols();
        let mut log_var = Matrix::zeros(n, b);
        let mut clamp_grad = Matrix::zeros(n, b);
        for j in 0..b {
            for i in 0..n {
                let phys = out[(n + i, j)] + 2.0 * self.norm.target_std[i].ln();
                let (v, g) = soft_clamp_log_var(phys, self.log_var_min, self.log_var_max);
                log_var[(i, j)] = v;
                clamp_grad[(i, j)] = g;
            }
        }
        Forward {
            mean_n: out.rows(0, n).into_owned(),
            log_var,
            clamp_grad,
        }
    }

    /// Batched prediction in physical units.
    pub fn predict_batch(&self, x: &Matrix, u: &Matrix) -> (Matrix, Matrix) {
        let out = self.net.forward(&self.normalized_inputs(x, u));
        let f = self.heads(&out);
        let mut mean = self.base_batch(x, u);
        for j in 0..x.ncols() {
            for i in 0..self.n_x {
                mean[(i, j)] +=
                    self.norm.target_mean[i] + self.norm.target_std[i] * f.mean_n[(i, j)];
            }
        }
        (mean, f.log_var.map(f64::exp))
    }

    /// Normalised targets of a batch.
    fn targets(&self, batch: &TransitionBatch) -> Matrix {
        let mut t = &batch.x_next - self.base_batch(&batch.x, &batch.u);
        for j in 0..t.ncols() {
            for i in 0..self.n_x {
                t[(i, j)] = (t[(i, j)] - self.norm.target_mean[i]) / self.norm.target_std[i];
            }
        }
        t
    }

    /// Weighted mean NLL in normalised space and its parameter gradient.
    fn loss_and_grad(&self, batch: &TransitionBatch, targets: &Matrix, want_grad: bool) -> (f64, Vec<f64>) {
        let inputs = self.normalized_inputs(&batch.x, &batch.u);
        let cache = self.net.forward_cached(&inputs);
        let f = self.heads(cache.output());
        let n = self.n_x;
        let wsum: f64 = batch.weights.iter().sum();
        let mut loss = 0.0;
        let mut grad_out = Matrix::zeros(2 * n, batch.len());
        for j in 0..batch.len() {
            let w = batch.weights[j] / wsum;
            for i in 0..n {
                let lv_n = f.log_var[(i, j)] - 2.0 * self.norm.target_std[i].ln();
                let inv = (-lv_n).exp();
                let r = f.mean_n[(i, j)] - targets[(i, j)];
                loss += w * (r * r * inv + lv_n);
                grad_out[(i, j)] = w * 2.0 * r * inv;
                grad_out[(n + i, j)] = w * (1.0 - r * r * inv) * f.clamp_grad[(i, j)];
            }
        }
        if !want_grad {
            return (loss, Vec::new());
        }
        let (grad, _) = self.net.backward(&cache, &grad_out);
        (loss, grad)
    }

    /// Mean NLL over rows, computed in normalised space.
    pub fn nll_loss(&self, batch: &TransitionBatch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        check_dim("batch state", self.n_x, batch.x.nrows())?;
        check_dim("batch action", self.n_u, batch.u.nrows())?;
        let t = self.targets(batch);
        Ok(self.loss_and_grad(batch, &t, false).0)
    }

    /// Analytic gradient of [`nll_loss`](Self::nll_loss) w.r.t. the flat parameters.
    pub fn nll_gradient(&self, batch: &TransitionBatch) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let t = self.targets(batch);
        Ok(self.loss_and_grad(batch, &t, true).1)
    }

    pub fn fit_normalizer(&mut self, batch: &TransitionBatch) {
        let n_in = self.n_x + self.n_u;
        let mut inputs = Matrix::zeros(n_in, batch.len());
        inputs.rows_mut(0, self.n_x).copy_from(&batch.x);
        inputs.rows_mut(self.n_x, self.n_u).copy_from(&batch.u);
        let (im, is) = mean_std(&inputs, &batch.weights);
        let raw = &batch.x_next - self.base_batch(&batch.x, &batch.u);
        let (tm, ts) = mean_std(&raw, &batch.weights);
        self.norm = Normalizer {
            input_mean: im,
            input_std: is,
            target_mean: tm,
            target_std: ts,
        };
    }
}

impl ProbabilisticDynamics for GaussianDynamicsModel {
    fn state_dim(&self) -> usize {
        self.n_x
    }

    fn action_dim(&self) -> usize {
        self.n_u
    }

    fn predict(&self, x: &Vector, u: &Vector) -> Result<(Vector, Vector)> {
        check_inputs(self.n_x, self.n_u, x, u)?;
        let xm = Matrix::from_column_slice(self.n_x, 1, x.as_slice());
        let um = Matrix::from_column_slice(self.n_u, 1, u.as_slice());
        let (m, v) = self.predict_batch(&xm, &um);
        Ok((
            Vector::from_column_slice(m.as_slice()),
            Vector::from_column_slice(v.as_slice()),
        ))
    }

    fn linearize(&self, x: &Vector, u: &Vector) -> Result<Linearization> {
        check_inputs(self.n_x, self.n_u, x, u)?;
        let n = self.n_x;
        let n_in = n + self.n_u;
        let mut z = Vector::zeros(n_in);
        for i in 0..n_in {
            let v = if i < n { x[i] } else { u[i - n] };
            z[i] = (v - self.norm.input_mean[i]) / self.norm.input_std[i];
        }
        let (out, jac) = self.net.jacobian(&z);
        let out_m = Matrix::from_column_slice(2 * n, 1, out.as_slice());
        let f = self.heads(&out_m);
        let mut mean = self.base(x, u);
        let mut var = Vector::zeros(n);
        let mut dmean = Matrix::zeros(n, n_in);
        let mut dvar = Matrix::zeros(n, n_in);
        for i in 0..n {
            let s = self.norm.target_std[i];
            mean[i] += self.norm.target_mean[i] + s * f.mean_n[(i, 0)];
            var[i] = f.log_var[(i, 0)].exp();
            for j in 0..n_in {
                let inv = 1.0 / self.norm.input_std[j];
                dmean[(i, j)] = s * jac[(i, j)] * inv;
                dvar[(i, j)] = var[i] * f.clamp_grad[(i, 0)] * jac[(n + i, j)] * inv;
            }
        }
        let mut a = dmean.columns(0, n).into_owned();
        let mut b = dmean.columns(n, self.n_u).into_owned();
        match (&self.prior, self.target_mode) {
            (Some(p), _) => {
                let (pa, pb) = p.jacobians(x, u);
                a += pa;
                b += pb;
            }
            (None, TargetMode::Delta) => {
                for i in 0..n {
                    a[(i, i)] += 1.0;
                }
            }
            (None, TargetMode::Absolute) => {}
        }
        Ok(Linearization {
            mean,
            var,
            a,
            b,
            var_dx: dvar.columns(0, n).into_owned(),
            var_du: dvar.columns(n, self.n_u).into_owned(),
        })
    }
}

/// Knobs for one round of ensemble training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            learning_rate: 1e-3,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    /// Holdout loss before the first update.
    pub initial_holdout: f64,
    /// Mean minibatch training loss per epoch.
    pub train: Vec<f64>,
    /// Holdout loss after each epoch.
    pub holdout: Vec<f64>,
}

fn train_member(
    model: &mut GaussianDynamicsModel,
    train: &TransitionBatch,
    holdout: &TransitionBatch,
    cfg: &TrainConfig,
    seed: u64,
) -> LossHistory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = train.len();
    let boot: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let data = train.select(&boot);
    let targets = model.targets(&data);
    let hold_targets = model.targets(holdout);
    let mut adam = Adam::new(model.net.num_params(), cfg.learning_rate);
    let initial_holdout = model.loss_and_grad(holdout, &hold_targets, false).0;
    let mut hist = LossHistory {
        initial_holdout,
        train: Vec::with_capacity(cfg.epochs),
        holdout: Vec::with_capacity(cfg.epochs),
    };
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mb = data.select(chunk);
            let mt = targets.select_columns(chunk);
            let (loss, grad) = model.loss_and_grad(&mb, &mt, true);
            adam.step(model.net.params_mut(), &grad);
            total += loss;
            count += 1;
        }
        hist.train.push(total / count as f64);
        hist.holdout
            .push(model.loss_and_grad(holdout, &hold_targets, false).0);
    }
    hist
}

/// Independently initialised members sharing input/output dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    members: Vec<GaussianDynamicsModel>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    members: Vec<GaussianDynamicsModel>,
}

impl Ensemble {
    pub fn new(
        size: usize,
        n_x: usize,
        n_u: usize,
        hidden: &[usize],
        prior: Option<Prior>,
        seed: u64,
    ) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("ensemble size must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let members = (0..size)
            .map(|_| GaussianDynamicsModel::new(n_x, n_u, hidden, &mut rng).with_prior(prior))
            .collect();
        Ok(Self { members })
    }

    pub fn from_members(members: Vec<GaussianDynamicsModel>) -> Result<Self> {
        let first = members.first().ok_or(Error::EmptyInput)?;
        let (n_x, n_u) = (first.n_x, first.n_u);
        for m in &members {
            check_dim("ensemble member state", n_x, m.n_x)?;
            check_dim("ensemble member action", n_u, m.n_u)?;
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[GaussianDynamicsModel] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [GaussianDynamicsModel] {
        &mut self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.members[0].n_x
    }

    pub fn action_dim(&self) -> usize {
        self.members[0].n_u
    }

    /// Refreshes normalisation statistics, then trains each member on its own
    /// bootstrap resample of the non-holdout rows.
    pub fn train(&mut self, data: &TransitionBatch, cfg: &TrainConfig) -> Result<Vec<LossHistory>> {
        if cfg.batch_size == 0 || cfg.epochs == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&cfg.holdout_fraction) {
            return Err(Error::InvalidArgument("holdout fraction must be in [0, 1)".into()));
        }
        if data.len() < 2 * cfg.batch_size {
            return Err(Error::InsufficientData {
                needed: 2 * cfg.batch_size,
                got: data.len(),
            });
        }
        check_dim("training states", self.state_dim(), data.x.nrows())?;
        check_dim("training actions", self.action_dim(), data.u.nrows())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng);
        let n_hold = ((data.len() as f64 * cfg.holdout_fraction).round() as usize).max(1);
        let holdout = data.select(&idx[..n_hold]);
        let train = data.select(&idx[n_hold..]);
        let seeds: Vec<u64> = (0..self.members.len()).map(|_| rng.random()).collect();
        for m in &mut self.members {
            m.fit_normalizer(data);
        }
        let histories = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .members
                .iter_mut()
                .zip(&seeds)
                .map(|(m, &seed)| {
                    let (train, holdout) = (&train, &holdout);
                    s.spawn(move || train_member(m, train, holdout, cfg, seed))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("member training thread panicked"))
                .collect::<Vec<_>>()
        });
        Ok(histories)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            members: self.members.clone(),
        };
        fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion(ck.version));
        }
        Self::from_members(ck.members)
    }
}
