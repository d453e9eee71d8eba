use serde::{Deserialize, Serialize};

use crate::Vector;

/// Cart-pole with state `[p, ṗ, φ, φ̇]`, `φ = 0` upright.
///
/// The textbook equations are written for an angle measured from the hanging
/// position; they are applied here through `θ = φ + π`, which keeps the
/// upright equilibrium unstable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_length: f64,
    pub gravity: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_length: 0.5,
            gravity: 9.81,
        }
    }
}

impl CartPoleParams {
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            cart_mass: self.cart_mass * factor,
            pole_mass: self.pole_mass * factor,
            pole_length: self.pole_length * factor,
            gravity: self.gravity,
        }
    }

    /// `(p̈, φ̈)` for force `u`.
    pub fn accelerations(&self, phi: f64, phi_dot: f64, u: f64) -> (f64, f64) {
        let (mc, mp, l, g) = (self.cart_mass, self.pole_mass, self.pole_length, self.gravity);
        // sin and cos of θ = φ + π.
        let (s, c) = phi.sin_cos();
        let (s, c) = (-s, -c);
        let alpha = mc + mp * s * s;
        let p_acc = (u + mp * s * (l * phi_dot * phi_dot + g * c)) / alpha;
        let theta_acc =
            (-u * c - mp * l * phi_dot * phi_dot * c * s - (mc + mp) * g * s) / (l * alpha);
        (p_acc, theta_acc)
    }

    pub(crate) fn integrate(&self, x: &Vector, u: &Vector, w: &Vector, dt: f64) -> Vector {
        let (p_acc, phi_acc) = self.accelerations(x[2], x[3], u[0]);
        let p_dot = x[1] + dt * p_acc + w[1];
        let phi_dot = x[3] + dt * phi_acc + w[3];
        Vector::from_row_slice(&[
            x[0] + dt * p_dot + w[0],
            p_dot,
            x[2] + dt * phi_dot + w[2],
            phi_dot,
        ])
    }

    pub(crate) fn reward(x: &Vector, u: &Vector) -> f64 {
        -(x.norm_squared() + 1e-4 * u.norm_squared())
    }
}
