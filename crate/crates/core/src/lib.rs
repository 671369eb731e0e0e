//! Exact conjugate Bayesian inference for space-time trajectory data.
//!
//! Three model families share one Normal–Inverse-Gamma core:
//!
//! * [`dlm`]: forward filtering for spatial dynamic linear models,
//! * [`traj_discrete`]: epoch-indexed trajectories with random-walk states and
//!   a duplicate-location map,
//! * [`traj_continuous`]: trajectories observed at arbitrary times under a
//!   non-separable space-time kernel.
//!
//! Candidate models with fixed hyperparameters are combined through
//! [`stacking`] (of means or of predictive densities), and evaluated with
//! [`metrics`]. [`simgen`] reproduces the synthetic data-generating processes
//! used to exercise the models, and [`diagnostics`] hosts the asymptotic
//! variance checks. [`cli`] is the batch front end used by the `trajstack`
//! binary.

pub mod bayes_core;
pub mod bessel;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod dlm;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod simgen;
pub mod stacking;
pub mod traj_continuous;
pub mod traj_discrete;

pub use error::{Error, Result};
