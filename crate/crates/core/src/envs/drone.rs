use serde::{Deserialize, Serialize};

use crate::{Matrix, Vector};

/// Quadrotor with state `[p, ṗ, (roll, pitch, yaw), ω]` driven through an
/// attitude-rate inner loop. Actions are `[c, ω_des]`: the mass-normalised
/// collective thrust (m/s²) and the desired body rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroneParams {
    pub mass: f64,
    pub arm_length: f64,
    pub inertia: [f64; 3],
    /// Rotor drag torque per unit thrust.
    pub torque_coefficient: f64,
    pub max_rotor_force: f64,
    pub gravity: f64,
    /// Proportional gain of the body-rate loop (1/s). Not a physical parameter.
    pub rate_gain: f64,
}

impl Default for DroneParams {
    fn default() -> Self {
        Self {
            mass: 0.5,
            arm_length: 0.15,
            inertia: [2.5e-3, 2.5e-3, 4.5e-3],
            torque_coefficient: 0.016,
            max_rotor_force: 4.0,
            gravity: 9.81,
            rate_gain: 20.0,
        }
    }
}

impl DroneParams {
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            mass: self.mass * factor,
            arm_length: self.arm_length * factor,
            inertia: self.inertia.map(|i| i * factor),
            torque_coefficient: self.torque_coefficient * factor,
            max_rotor_force: self.max_rotor_force * factor,
            gravity: self.gravity,
            rate_gain: self.rate_gain,
        }
    }

    /// Maps rotor forces to `[ΣF, η_x, η_y, η_z]`.
    pub fn allocation(&self) -> Matrix {
        let k = self.arm_length / std::f64::consts::SQRT_2;
        let m = self.torque_coefficient;
        Matrix::from_row_slice(
            4,
            4,
            &[
                1.0, 1.0, 1.0, 1.0, //
                -k, -k, k, k, //
                -k, k, k, -k, //
                -m, m, -m, m,
            ],
        )
    }

    /// Body-to-world rotation for ZYX Euler angles.
    pub fn rotation(roll: f64, pitch: f64, yaw: f64) -> Matrix {
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sy, cy) = yaw.sin_cos();
        Matrix::from_row_slice(
            3,
            3,
            &[
                cy * cp,
                cy * sp * sr - sy * cr,
                cy * sp * cr + sy * sr,
                sy * cp,
                sy * sp * sr + cy * cr,
                sy * sp * cr - cy * sr,
                -sp,
                cp * sr,
                cp * cr,
            ],
        )
    }

    /// Rotor forces commanded by the rate loop, clipped to `[0, F_max]`.
    pub fn rotor_forces(&self, omega: [f64; 3], action: &Vector) -> Vector {
        let i = self.inertia;
        let gyro = [
            omega[1] * i[2] * omega[2] - omega[2] * i[1] * omega[1],
            omega[2] * i[0] * omega[0] - omega[0] * i[2] * omega[2],
            omega[0] * i[1] * omega[1] - omega[1] * i[0] * omega[0],
        ];
        let mut wrench = Vector::zeros(4);
        wrench[0] = self.mass * action[0];
        for a in 0..3 {
            wrench[a + 1] = i[a] * self.rate_gain * (action[a + 1] - omega[a]) + gyro[a];
        }
        let forces = self
            .allocation()
            .lu()
            .solve(&wrench)
            .expect("rotor allocation is invertible");
        forces.map(|f| f.clamp(0.0, self.max_rotor_force))
    }

    pub(crate) fn integrate(&self, x: &Vector, u: &Vector, w: &Vector, dt: f64) -> Vector {
        let omega = [x[9], x[10], x[11]];
        let forces = self.rotor_forces(omega, u);
        let wrench = self.allocation() * &forces;
        let i = self.inertia;
        let omega_dot = [
            (wrench[1] - (omega[1] * i[2] * omega[2] - omega[2] * i[1] * omega[1])) / i[0],
            (wrench[2] - (omega[2] * i[0] * omega[0] - omega[0] * i[2] * omega[2])) / i[1],
            (wrench[3] - (omega[0] * i[1] * omega[1] - omega[1] * i[0] * omega[0])) / i[2],
        ];
        let (roll, pitch, yaw) = (x[6], x[7], x[8]);
        let r = Self::rotation(roll, pitch, yaw);
        let thrust = wrench[0] / self.mass;
        let acc = [
            r[(0, 2)] * thrust,
            r[(1, 2)] * thrust,
            r[(2, 2)] * thrust - self.gravity,
        ];
        let mut next = Vector::zeros(12);
        let new_omega = [
            omega[0] + dt * omega_dot[0] + w[9],
            omega[1] + dt * omega_dot[1] + w[10],
            omega[2] + dt * omega_dot[2] + w[11],
        ];
        let (sr, cr) = roll.sin_cos();
        let (tp, cp) = (pitch.tan(), pitch.cos());
        let euler_rate = [
            new_omega[0] + sr * tp * new_omega[1] + cr * tp * new_omega[2],
            cr * new_omega[1] - sr * new_omega[2],
            (sr * new_omega[1] + cr * new_omega[2]) / cp,
        ];
        for a in 0..3 {
            let vel = x[3 + a] + dt * acc[a] + w[3 + a];
            next[3 + a] = vel;
            next[a] = x[a] + dt * vel + w[a];
            next[6 + a] = x[6 + a] + dt * euler_rate[a] + w[6 + a];
            next[9 + a] = new_omega[a];
        }
        next
    }

    pub(crate) fn reward(x: &Vector) -> f64 {
        let dz = x[2] - 1.0;
        -(x[0] * x[0] + x[1] * x[1] + dz * dz)
    }
}
