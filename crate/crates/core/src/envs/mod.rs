//! Benchmark systems: dynamics, constraints, rewards, disturbances, early
//! termination and safe backup controllers.

mod backup;
mod cartpole;
mod drone;
mod pendulum;
mod twolink;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backup::{
    backup_policy, dlqr, Controller, DroneClimbController, LqrController, TwoLinkHoldController,
    UniformRandomController,
};
pub use cartpole::CartPoleParams;
pub use drone::DroneParams;
pub use pendulum::PendulumParams;
pub use twolink::TwoLinkParams;

use crate::ellipsoid::Polytope;
use crate::error::check_dim;
use crate::{Error, Result, Vector};

/// 50 Hz control rate shared by every task.
pub const DEFAULT_DT: f64 = 0.02;
pub const DEFAULT_EPISODE_LENGTH: usize = 400;
pub const DEFAULT_DISTURBANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Pendulum,
    CartPole,
    TwoLinkArm,
    Drone,
}

impl EnvKind {
    pub const ALL: [EnvKind; 4] = [
        EnvKind::Pendulum,
        EnvKind::CartPole,
        EnvKind::TwoLinkArm,
        EnvKind::Drone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Pendulum => "pendulum",
            EnvKind::CartPole => "cartpole",
            EnvKind::TwoLinkArm => "twolinkarm",
            EnvKind::Drone => "drone",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pendulum" => Ok(EnvKind::Pendulum),
            "cartpole" => Ok(EnvKind::CartPole),
            "twolinkarm" | "twolink" => Ok(EnvKind::TwoLinkArm),
            "drone" => Ok(EnvKind::Drone),
            other => Err(Error::UnknownEnv(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvParams {
    Pendulum(PendulumParams),
    CartPole(CartPoleParams),
    TwoLinkArm(TwoLinkParams),
    Drone(DroneParams),
}

impl EnvParams {
    pub fn defaults(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Pendulum => EnvParams::Pendulum(PendulumParams::default()),
            EnvKind::CartPole => EnvParams::CartPole(CartPoleParams::default()),
            EnvKind::TwoLinkArm => EnvParams::TwoLinkArm(TwoLinkParams::default()),
            EnvKind::Drone => EnvParams::Drone(DroneParams::default()),
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            EnvParams::Pendulum(_) => EnvKind::Pendulum,
            EnvParams::CartPole(_) => EnvKind::CartPole,
            EnvParams::TwoLinkArm(_) => EnvKind::TwoLinkArm,
            EnvParams::Drone(_) => EnvKind::Drone,
        }
    }

    /// Every physical parameter multiplied by `factor` (gravity excluded).
    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            EnvParams::Pendulum(p) => EnvParams::Pendulum(p.scaled(factor)),
            EnvParams::CartPole(p) => EnvParams::CartPole(p.scaled(factor)),
            EnvParams::TwoLinkArm(p) => EnvParams::TwoLinkArm(p.scaled(factor)),
            EnvParams::Drone(p) => EnvParams::Drone(p.scaled(factor)),
        }
    }

    fn integrate(&self, x: &Vector, u: &Vector, w: &Vector, dt: f64) -> Vector {
        match self {
            EnvParams::Pendulum(p) => p.integrate(x, u, w, dt),
            EnvParams::CartPole(p) => p.integrate(x, u, w, dt),
            EnvParams::TwoLinkArm(p) => p.integrate(x, u, w, dt),
            EnvParams::Drone(p) => p.integrate(x, u, w, dt),
        }
    }

    fn reward(&self, x: &Vector, u: &Vector) -> f64 {
        match self {
            EnvParams::Pendulum(_) => PendulumParams::reward(x, u),
            EnvParams::CartPole(_) => CartPoleParams::reward(x, u),
            EnvParams::TwoLinkArm(p) => p.reward(x, u),
            EnvParams::Drone(_) => DroneParams::reward(x),
        }
    }
}

/// Static description of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub n_x: usize,
    pub n_u: usize,
    pub dt: f64,
    pub state_polytope: Polytope,
    pub action_polytope: Polytope,
    pub action_low: Vector,
    pub action_high: Vector,
    /// State coordinates the safe-set estimate is projected onto.
    pub safe_set_coords: (usize, usize),
    pub params: EnvParams,
    /// Half-width of the uniform additive disturbance, per state coordinate.
    pub disturbance: Vector,
    pub episode_length: usize,
}

fn velocity_coords(kind: EnvKind) -> &'static [usize] {
    match kind {
        EnvKind::Pendulum => &[1],
        EnvKind::CartPole => &[1, 3],
        EnvKind::TwoLinkArm => &[6, 7],
        EnvKind::Drone => &[3, 4, 5, 9, 10, 11],
    }
}

impl EnvSpec {
    pub fn new(kind: EnvKind) -> Self {
        Self::with_params(EnvParams::defaults(kind))
    }

    pub fn with_params(params: EnvParams) -> Self {
        let kind = params.kind();
        let (n_x, n_u, state_polytope, low, high, coords) = match kind {
            EnvKind::Pendulum => (
                2,
                1,
                Polytope::from_box(&[PI / 4.0, -8.0], &[25.0 * PI / 12.0, 8.0]),
                vec![-1.0],
                vec![1.0],
                (0, 1),
            ),
            EnvKind::CartPole => {
                let max_angle = 12f64.to_radians();
                (
                    4,
                    1,
                    Polytope::from_coordinate_bounds(4, &[(0, -2.4, 2.4), (2, -max_angle, max_angle)]),
                    vec![-10.0],
                    vec![10.0],
                    (0, 2),
                )
            }
            EnvKind::TwoLinkArm => (
                8,
                2,
                Polytope::from_coordinate_bounds(8, &[(0, -0.5, 0.5), (1, -0.5, 0.5)]),
                vec![-1.0, -1.0],
                vec![1.0, 1.0],
                (0, 1),
            ),
            EnvKind::Drone => {
                let max_tilt = 20f64.to_radians();
                (
                    12,
                    4,
                    Polytope::from_coordinate_bounds(
                        12,
                        &[(2, 0.0, 2.0), (6, -max_tilt, max_tilt), (7, -max_tilt, max_tilt)],
                    ),
                    vec![0.0, -3.0, -3.0, -3.0],
                    vec![20.0, 3.0, 3.0, 3.0],
                    (2, 5),
                )
            }
        };
        let state_polytope = state_polytope.expect("static constraint tables are well formed");
        let action_polytope =
            Polytope::from_box(&low, &high).expect("static action bounds are well formed");
        let mut disturbance = Vector::zeros(n_x);
        for &i in velocity_coords(kind) {
            disturbance[i] = DEFAULT_DISTURBANCE;
        }
        Self {
            kind,
            n_x,
            n_u,
            dt: DEFAULT_DT,
            state_polytope,
            action_polytope,
            action_low: Vector::from_vec(low),
            action_high: Vector::from_vec(high),
            safe_set_coords: coords,
            params,
            disturbance,
            episode_length: DEFAULT_EPISODE_LENGTH,
        }
    }

    /// Sets the disturbance half-width on every velocity coordinate.
    pub fn with_disturbance_scale(mut self, scale: f64) -> Self {
        self.disturbance = Vector::zeros(self.n_x);
        for &i in velocity_coords(self.kind) {
            self.disturbance[i] = scale;
        }
        self
    }

    pub fn clip_action(&self, u: &Vector) -> Vector {
        Vector::from_fn(self.n_u, |i, _| u[i].clamp(self.action_low[i], self.action_high[i]))
    }

    /// Disturbance-free step with the action clipped to the bounds.
    pub fn mean_step(&self, x: &Vector, u: &Vector) -> Vector {
        self.params
            .integrate(x, &self.clip_action(u), &Vector::zeros(self.n_x), self.dt)
    }

    /// Same as [`mean_step`](Self::mean_step) under a different parameter set.
    pub fn mean_step_with(&self, params: &EnvParams, x: &Vector, u: &Vector) -> Vector {
        params.integrate(x, &self.clip_action(u), &Vector::zeros(self.n_x), self.dt)
    }

    /// Disturbance-free step under `params` without clipping the action.
    pub fn integrate_with(params: &EnvParams, x: &Vector, u: &Vector, dt: f64) -> Vector {
        params.integrate(x, u, &Vector::zeros(x.len()), dt)
    }

    /// Reward for reaching `x_next` with action `u`.
    pub fn reward(&self, x_next: &Vector, u: &Vector) -> f64 {
        self.params.reward(x_next, u)
    }

    /// Exact constraint check with zero tolerance.
    pub fn violates(&self, x: &Vector) -> bool {
        !self.state_polytope.contains(x, 0.0)
    }

    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..=hi);
        match &self.params {
            EnvParams::Pendulum(_) => Vector::from_row_slice(&[PI + u(-0.1, 0.1), u(-0.05, 0.05)]),
            EnvParams::CartPole(_) => Vector::from_fn(4, |_, _| u(-0.05, 0.05)),
            EnvParams::TwoLinkArm(p) => {
                let phi = [u(-0.1, 0.1), backup::TWOLINK_REST_ELBOW + u(-0.1, 0.1)];
                let phi_dot = [u(-0.05, 0.05), u(-0.05, 0.05)];
                p.state_from_joints(phi, phi_dot)
            }
            EnvParams::Drone(_) => {
                let mut x = Vector::zeros(12);
                x[0] = u(-0.05, 0.05);
                x[1] = u(-0.05, 0.05);
                x[2] = u(0.05, 0.1);
                for i in 6..9 {
                    x[i] = u(-0.02, 0.02);
                }
                x
            }
        }
    }

    /// Human-readable defaults for the `describe` command.
    pub fn describe(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialises")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vector,
    pub reward: f64,
    /// Early termination (constraint violation).
    pub terminated: bool,
    pub violated: bool,
    /// Episode length reached without violation.
    pub truncated: bool,
}

/// A running episode of one task.
#[derive(Debug, Clone)]
pub struct Environment {
    spec: EnvSpec,
    rng: ChaCha8Rng,
    state: Vector,
    steps: usize,
    terminated: bool,
    violated: bool,
}

impl Environment {
    pub fn new(spec: EnvSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = spec.sample_initial_state(&mut rng);
        Self {
            spec,
            rng,
            state,
            steps: 0,
            terminated: false,
            violated: false,
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn state(&self) -> &Vector {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    /// Starts a new episode from the task's initial distribution.
    pub fn reset(&mut self) -> Vector {
        self.state = self.spec.sample_initial_state(&mut self.rng);
        self.steps = 0;
        self.terminated = false;
        self.violated = false;
        self.state.clone()
    }

    /// Reseeds and resets; equal seeds give equal initial states.
    pub fn reset_with_seed(&mut self, seed: u64) -> Vector {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.reset()
    }

    /// Places the system in an arbitrary state (tests and debugging).
    pub fn set_state(&mut self, x: Vector) -> Result<()> {
        check_dim("environment state", self.spec.n_x, x.len())?;
        self.state = x;
        self.terminated = false;
        self.violated = false;
        Ok(())
    }

    pub fn step(&mut self, u: &Vector) -> Result<StepOutcome> {
        if self.terminated {
            return Err(Error::StepAfterTermination);
        }
        check_dim("environment action", self.spec.n_u, u.len())?;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("environment action"));
        }
        let u = self.spec.clip_action(u);
        let w = Vector::from_fn(self.spec.n_x, |i, _| {
            let s = self.spec.disturbance[i];
            if s > 0.0 {
                self.rng.random_range(-s..=s)
            } else {
                0.0
            }
        });
        let next = self.spec.params.integrate(&self.state, &u, &w, self.spec.dt);
        let reward = self.spec.reward(&next, &u);
        let violated = self.spec.violates(&next);
        self.steps += 1;
        self.state = next.clone();
        self.violated = violated;
        self.terminated = violated;
        Ok(StepOutcome {
            next_state: next,
            reward,
            terminated: violated,
            violated,
            truncated: !violated && self.steps >= self.spec.episode_length,
        })
    }
}
