//! Certification of learning-controller actions with ensembles of ellipsoidal
//! tubes planned under learned probabilistic dynamics.
//!
//! The crate is organised bottom-up:
//!
//! * [`ellipsoid`]: ellipsoid/polytope algebra (affine maps, outer Minkowski
//!   sums, inscription margins, action-set tightening).
//! * [`nn`]: a small dense MLP with analytic parameter and input gradients.
//! * [`dynamics`]: Gaussian MLP dynamics models, ensembles, NLL training and
//!   physics priors.
//! * [`tube`]: single-model and ensemble ellipsoidal tube propagation.
//! * [`certifier`]: the per-step minimal-intervention nonlinear program.
//! * [`envs`]: pendulum, cart-pole, two-link arm and quadrotor benchmarks.
//! * [`safe_set`]: convex-hull safe-set estimates and delayed terminal sets.
//! * [`learner`]: a reduced model-based soft actor-critic proposing actions.
//! * [`data`]: transition records and their JSON-lines persistence.

pub mod certifier;
pub mod data;
pub mod dynamics;
pub mod ellipsoid;
pub mod envs;
mod error;
pub mod learner;
pub mod linalg;
pub mod nn;
pub mod safe_set;
pub mod tube;

pub use error::{Error, Result};

pub type Vector = nalgebra::DVector<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;
