//! Density-driven optimal control (D²OC) for multi-agent coverage with
//! connectivity preservation.
//!
//! A fleet of discrete-time LTI agents covers a weighted point cloud (the
//! reference map). Each control step an agent selects the nearby samples with
//! the most uncovered weight, reduces the local transport cost to their
//! barycenter through a box-constrained quadratic program over its stacked
//! future inputs, and optionally adds smooth penalties that keep designated
//! communication links inside range for every input the neighbor could apply.
//! Covered weight is then discounted and residual-weight ledgers are merged
//! (elementwise min) with whoever is in communication range.
//!
//! Modules follow the pipeline:
//!
//! * [`lti`]: agent models, relative degree, stacked output predictors.
//! * [`transport`]: reference maps, weight ledgers, sample selection,
//!   barycenters, sliced and exact Wasserstein distances.
//! * [`qp`]: the coverage QP, its closed-form unconstrained optimum, and the
//!   projected-Newton box solver.
//! * [`connectivity`]: reachable-set radii, neighbor forecasts, softplus
//!   range/collision penalties, and the projected-gradient solver for the
//!   penalized problem.
//! * [`protocol`]: the three-stage decentralized cycle (control, weight
//!   adjustment, min-merge exchange) and communication topologies.
//! * [`sim`]: scenario construction, the closed-loop harness, metrics, and
//!   file exports.

pub mod connectivity;
mod error;
pub mod lti;
pub mod protocol;
pub mod qp;
pub mod sim;
pub mod transport;

pub use error::{Error, Result};
