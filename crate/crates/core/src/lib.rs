//! Policy-gradient methods for linear quadratic regulators with
//! multiplicative noise.
//!
//! - [`model`]: problem data, validation, noise distributions and generators.
//! - [`msops`]: mean-square stability, generalized Lyapunov/Riccati solvers,
//!   exact cost and gradient.
//! - [`model_based`]: exact-gradient descent (GD, natural gradient,
//!   Gauss–Newton) with step-size bounds.
//! - [`model_free`]: rollout-based gradient estimation and descent.
//! - [`exec`]: sequential or rayon-parallel execution of rollout batches.
//! - [`experiments`]: presets and drivers used by the `mnlqr` binary.

pub mod error;
pub mod exec;
pub mod experiments;
pub mod linalg;
pub mod model;
pub mod model_based;
pub mod model_free;
pub mod msops;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use model::{LqrmProblem, NoiseSpec};
