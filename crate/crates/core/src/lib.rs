//! Centralized model predictive control for longitudinal vehicle platoons,
//! with an online residual-learning stage that corrects actuation errors.
//!
//! The control loop at every step is
//!
//! ```text
//! X_k --MPC--> u_p --residual--> u_r --actuation error--> u_a --plant--> X_{k+1}
//! ```
//!
//! * [`dynamics`]: single-vehicle and stacked platoon dynamics.
//! * [`mpc`]: condensation of the tracking problem into a dense QP.
//! * [`qp`]: dual active-set QP solver with KKT certificates.
//! * [`residual_q`] / [`residual_nn`]: tabular Q-learning and MLP residual stages.
//! * [`disturbance`]: affine and quadratic actuation-error models.
//! * [`scenario`]: reference trajectories and the closed-loop experiment runner.
//! * [`metrics`]: cumulative/maximum absolute errors and percentage gaps.
//! * [`config`]: JSON run configuration, CLI overrides and the experiment matrix.
//! * [`harness`]: running the matrix, CSV and manifest output, plot export.

pub mod config;
pub mod disturbance;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod mpc;
pub mod qp;
pub mod residual_nn;
pub mod residual_q;
pub mod scenario;
pub mod textio;

pub use error::{Error, Result};
