use serde::{Deserialize, Serialize};

use crate::Vector;

/// `φ̈ = (τ + m g l sin φ − b φ̇) / (m l²)`, with `φ = π` hanging down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub damping: f64,
    pub gravity: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            mass: 0.5,
            length: 0.5,
            damping: 0.1,
            gravity: 9.81,
        }
    }
}

impl PendulumParams {
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            mass: self.mass * factor,
            length: self.length * factor,
            damping: self.damping * factor,
            gravity: self.gravity,
        }
    }

    pub fn angular_acceleration(&self, phi: f64, phi_dot: f64, torque: f64) -> f64 {
        let ml2 = self.mass * self.length * self.length;
        (torque + self.mass * self.gravity * self.length * phi.sin() - self.damping * phi_dot) / ml2
    }

    /// `½ m l² φ̇² + m g l cos φ` (potential measured from the pivot).
    pub fn energy(&self, x: &Vector) -> f64 {
        let ml2 = self.mass * self.length * self.length;
        0.5 * ml2 * x[1] * x[1] + self.mass * self.gravity * self.length * x[0].cos()
    }

    pub(crate) fn integrate(&self, x: &Vector, u: &Vector, w: &Vector, dt: f64) -> Vector {
        let acc = self.angular_acceleration(x[0], x[1], u[0]);
        let phi_dot = x[1] + dt * acc + w[1];
        let phi = x[0] + dt * phi_dot + w[0];
        Vector::from_row_slice(&[phi, phi_dot])
    }

    pub(crate) fn reward(x: &Vector, u: &Vector) -> f64 {
        x[0].cos() - 1e-3 * x[1] * x[1] - 1e-3 * u.norm_squared()
    }
}
