use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvKind, EnvParams, EnvSpec};
use crate::{Error, Matrix, Result, Vector};

/// Elbow angle of the two-link rest posture; the end-effector then sits
/// about 0.11 from the shoulder.
pub(crate) const TWOLINK_REST_ELBOW: f64 = 2.8;

/// State-feedback controller producing actions inside the action bounds.
pub trait Controller: Send {
    fn act(&mut self, x: &Vector) -> Vector;
}

fn clip(u: Vector, low: &Vector, high: &Vector) -> Vector {
    Vector::from_fn(u.len(), |i, _| u[i].clamp(low[i], high[i]))
}

fn dither(rng: &mut ChaCha8Rng, amplitude: &[f64]) -> Vector {
    Vector::from_iterator(
        amplitude.len(),
        amplitude.iter().map(|&a| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 }),
    )
}

#[derive(Debug, Clone)]
pub struct UniformRandomController {
    low: Vector,
    high: Vector,
    rng: ChaCha8Rng,
}

impl UniformRandomController {
    pub fn new(low: Vector, high: Vector, seed: u64) -> Self {
        Self {
            low,
            high,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Controller for UniformRandomController {
    fn act(&mut self, _x: &Vector) -> Vector {
        Vector::from_fn(self.low.len(), |i, _| {
            self.rng.random_range(self.low[i]..=self.high[i])
        })
    }
}

/// `u = clip(−K x + noise)`.
#[derive(Debug, Clone)]
pub struct LqrController {
    pub gain: Matrix,
    low: Vector,
    high: Vector,
    noise: Vec<f64>,
    rng: ChaCha8Rng,
}

impl LqrController {
    pub fn new(gain: Matrix, low: Vector, high: Vector) -> Self {
        let n_u = low.len();
        Self {
            gain,
            low,
            high,
            noise: vec![0.0; n_u],
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Adds uniform dithering of the given half-width to every action.
    pub fn with_noise(mut self, amplitude: f64, seed: u64) -> Self {
        self.noise = vec![amplitude; self.low.len()];
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    /// LQR about the origin of a task, linearised by central differences.
    pub fn for_spec(spec: &EnvSpec, q: &Matrix, r: &Matrix) -> Result<Self> {
        let (a, b) = linearize(spec, &Vector::zeros(spec.n_x), &Vector::zeros(spec.n_u));
        let gain = dlqr(&a, &b, q, r)?;
        Ok(Self::new(gain, spec.action_low.clone(), spec.action_high.clone()))
    }
}

impl Controller for LqrController {
    fn act(&mut self, x: &Vector) -> Vector {
        let u = -(&self.gain * x) + dither(&mut self.rng, &self.noise);
        clip(u, &self.low, &self.high)
    }
}

/// Joint-space PD hold of the folded rest posture.
#[derive(Debug, Clone)]
pub struct TwoLinkHoldController {
    pub target: [f64; 2],
    pub kp: f64,
    pub kd: f64,
    low: Vector,
    high: Vector,
    noise: Vec<f64>,
    rng: ChaCha8Rng,
}

impl TwoLinkHoldController {
    pub fn new(spec: &EnvSpec) -> Self {
        Self {
            target: [0.0, TWOLINK_REST_ELBOW],
            kp: 1.0,
            kd: 0.2,
            low: spec.action_low.clone(),
            high: spec.action_high.clone(),
            noise: vec![0.0; 2],
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn with_noise(mut self, amplitude: f64, seed: u64) -> Self {
        self.noise = vec![amplitude; 2];
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }
}

impl Controller for TwoLinkHoldController {
    fn act(&mut self, x: &Vector) -> Vector {
        let u = Vector::from_fn(2, |i, _| {
            self.kp * (self.target[i] - x[4 + i]) - self.kd * x[6 + i]
        }) + dither(&mut self.rng, &self.noise);
        clip(u, &self.low, &self.high)
    }
}

/// Cascaded P-controller flying to `[0, 0, 1]` through the rate interface.
#[derive(Debug, Clone)]
pub struct DroneClimbController {
    pub target: [f64; 3],
    gravity: f64,
    low: Vector,
    high: Vector,
    noise: Vec<f64>,
    rng: ChaCha8Rng,
}

impl DroneClimbController {
    const KZ: f64 = 2.0;
    const KZ_DOT: f64 = 1.5;
    const KXY: f64 = 0.3;
    const KXY_DOT: f64 = 0.4;
    const KATT: f64 = 4.0;
    const MAX_TILT: f64 = 0.2;

    pub fn new(spec: &EnvSpec) -> Self {
        let gravity = match spec.params {
            EnvParams::Drone(p) => p.gravity,
            _ => 9.81,
        };
        Self {
            target: [0.0, 0.0, 1.0],
            gravity,
            low: spec.action_low.clone(),
            high: spec.action_high.clone(),
            noise: vec![0.0; 4],
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn with_noise(mut self, thrust: f64, rates: f64, seed: u64) -> Self {
        self.noise = vec![thrust, rates, rates, rates];
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }
}

impl Controller for DroneClimbController {
    fn act(&mut self, x: &Vector) -> Vector {
        let c = self.gravity + Self::KZ * (self.target[2] - x[2]) - Self::KZ_DOT * x[5];
        let ax = Self::KXY * (self.target[0] - x[0]) - Self::KXY_DOT * x[3];
        let ay = Self::KXY * (self.target[1] - x[1]) - Self::KXY_DOT * x[4];
        let pitch_des = ax.clamp(-Self::MAX_TILT, Self::MAX_TILT);
        let roll_des = (-ay).clamp(-Self::MAX_TILT, Self::MAX_TILT);
        let u = Vector::from_row_slice(&[
            c,
            Self::KATT * (roll_des - x[6]),
            Self::KATT * (pitch_des - x[7]),
            -Self::KATT * x[8],
        ]) + dither(&mut self.rng, &self.noise);
        clip(u, &self.low, &self.high)
    }
}

/// Discrete-time LQR gain `K` (so that `u = −Kx`) from the Riccati fixed point.
pub fn dlqr(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols())
    {
        return Err(Error::InvalidArgument("dlqr: inconsistent matrix shapes".into()));
    }
    let mut p = q.clone();
    for _ in 0..100_000 {
        let btp = b.transpose() * &p;
        let gain = (r + &btp * b)
            .lu()
            .solve(&(&btp * a))
            .ok_or_else(|| Error::InvalidArgument("dlqr: singular R + BᵀPB".into()))?;
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * &gain;
        let next = (&next + next.transpose()) * 0.5;
        let delta = (&next - &p).amax();
        p = next;
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dlqr Riccati iteration"));
        }
        if delta <= 1e-12 * p.amax().max(1.0) {
            let btp = b.transpose() * &p;
            return (r + &btp * b)
                .lu()
                .solve(&(&btp * a))
                .ok_or_else(|| Error::InvalidArgument("dlqr: singular R + BᵀPB".into()));
        }
    }
    Err(Error::InvalidArgument("dlqr: Riccati iteration did not converge".into()))
}

/// Central-difference Jacobians of the disturbance-free step.
pub(crate) fn linearize(spec: &EnvSpec, x: &Vector, u: &Vector) -> (Matrix, Matrix) {
    const H: f64 = 1e-6;
    let mut a = Matrix::zeros(spec.n_x, spec.n_x);
    for j in 0..spec.n_x {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += H;
        xm[j] -= H;
        let col = (spec.mean_step(&xp, u) - spec.mean_step(&xm, u)) / (2.0 * H);
        a.set_column(j, &col);
    }
    let mut b = Matrix::zeros(spec.n_x, spec.n_u);
    for j in 0..spec.n_u {
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += H;
        um[j] -= H;
        let col = (spec.mean_step(x, &up) - spec.mean_step(x, &um)) / (2.0 * H);
        b.set_column(j, &col);
    }
    (a, b)
}

/// The safe controller used to collect the initial data set of a task.
pub fn backup_policy(spec: &EnvSpec, seed: u64) -> Box<dyn Controller> {
    match spec.kind {
        EnvKind::Pendulum => Box::new(UniformRandomController::new(
            spec.action_low.clone(),
            spec.action_high.clone(),
            seed,
        )),
        EnvKind::CartPole => {
            let q = Matrix::from_diagonal(&Vector::from_row_slice(&[1.0, 1.0, 10.0, 1.0]));
            let r = Matrix::identity(1, 1);
            Box::new(
                LqrController::for_spec(spec, &q, &r)
                    .expect("cart-pole linearisation is stabilisable")
                    .with_noise(2.0, seed),
            )
        }
        EnvKind::TwoLinkArm => Box::new(TwoLinkHoldController::new(spec).with_noise(0.2, seed)),
        EnvKind::Drone => Box::new(DroneClimbController::new(spec).with_noise(0.5, 0.2, seed)),
    }
}
