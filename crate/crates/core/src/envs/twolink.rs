use serde::{Deserialize, Serialize};

use crate::{Matrix, Vector};

/// Planar two-joint arm `M(φ)φ̈ + C(φ, φ̇) + Bφ̇ = τ` (no gravity).
///
/// State layout: `[p₁, p₂, p₁−r₁, p₂−r₂, φ₁, φ₂, φ̇₁, φ̇₂]` where `p` is the
/// end-effector position and `r` the reference point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoLinkParams {
    pub mass1: f64,
    pub mass2: f64,
    pub length1: f64,
    pub length2: f64,
    /// Distance from joint 2 to the centre of mass of link 2.
    pub com2: f64,
    pub inertia1: f64,
    pub inertia2: f64,
    pub friction_diag: f64,
    pub friction_off: f64,
    pub reference: [f64; 2],
}

impl Default for TwoLinkParams {
    fn default() -> Self {
        Self {
            mass1: 1.4,
            mass2: 1.1,
            length1: 0.3,
            length2: 0.33,
            com2: 0.16,
            inertia1: 0.025,
            inertia2: 0.045,
            friction_diag: 0.05,
            friction_off: 0.025,
            reference: [0.3, 0.3],
        }
    }
}

impl TwoLinkParams {
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            mass1: self.mass1 * factor,
            mass2: self.mass2 * factor,
            length1: self.length1 * factor,
            length2: self.length2 * factor,
            com2: self.com2 * factor,
            inertia1: self.inertia1 * factor,
            inertia2: self.inertia2 * factor,
            friction_diag: self.friction_diag * factor,
            friction_off: self.friction_off * factor,
            reference: self.reference,
        }
    }

    pub fn end_effector(&self, phi1: f64, phi2: f64) -> [f64; 2] {
        [
            self.length1 * phi1.cos() + self.length2 * (phi1 + phi2).cos(),
            self.length1 * phi1.sin() + self.length2 * (phi1 + phi2).sin(),
        ]
    }

    pub fn joint_accelerations(&self, phi: [f64; 2], phi_dot: [f64; 2], tau: [f64; 2]) -> [f64; 2] {
        let a1 = self.inertia1 + self.inertia2 + self.mass2 * self.length1 * self.length1;
        let a2 = self.mass2 * self.length1 * self.com2;
        let a3 = self.inertia2;
        let (s2, c2) = phi[1].sin_cos();
        let m = Matrix::from_row_slice(
            2,
            2,
            &[a1 + 2.0 * a2 * c2, a3 + a2 * c2, a3 + a2 * c2, a3],
        );
        let coriolis = [
            -phi_dot[1] * (2.0 * phi_dot[0] + phi_dot[1]) * a2 * s2,
            phi_dot[0] * phi_dot[0] * a2 * s2,
        ];
        let friction = [
            self.friction_diag * phi_dot[0] + self.friction_off * phi_dot[1],
            self.friction_off * phi_dot[0] + self.friction_diag * phi_dot[1],
        ];
        let rhs = Vector::from_row_slice(&[
            tau[0] - coriolis[0] - friction[0],
            tau[1] - coriolis[1] - friction[1],
        ]);
        let acc = m.lu().solve(&rhs).expect("arm inertia matrix is positive definite");
        [acc[0], acc[1]]
    }

    pub fn state_from_joints(&self, phi: [f64; 2], phi_dot: [f64; 2]) -> Vector {
        let p = self.end_effector(phi[0], phi[1]);
        Vector::from_row_slice(&[
            p[0],
            p[1],
            p[0] - self.reference[0],
            p[1] - self.reference[1],
            phi[0],
            phi[1],
            phi_dot[0],
            phi_dot[1],
        ])
    }

    pub(crate) fn integrate(&self, x: &Vector, u: &Vector, w: &Vector, dt: f64) -> Vector {
        let phi = [x[4], x[5]];
        let phi_dot = [x[6], x[7]];
        let acc = self.joint_accelerations(phi, phi_dot, [u[0], u[1]]);
        let nd = [
            phi_dot[0] + dt * acc[0] + w[6],
            phi_dot[1] + dt * acc[1] + w[7],
        ];
        let np = [phi[0] + dt * nd[0] + w[4], phi[1] + dt * nd[1] + w[5]];
        self.state_from_joints(np, nd)
    }

    pub(crate) fn reward(&self, x: &Vector, u: &Vector) -> f64 {
        let dx = x[0] - self.reference[0];
        let dy = x[1] - self.reference[1];
        -(dx * dx + dy * dy).sqrt() - 1e-3 * u.norm_squared()
    }
}
