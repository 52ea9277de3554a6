//! Cooperative distributed model predictive control for planar swarms:
//! agents solve a shared optimal control problem every sampling step with
//! sequential quadratic programming on the outer level and consensus ADMM
//! on the inner level, exchanging messages only with graph neighbors.

pub mod acceptance;
pub mod admm;
pub mod controller;
pub mod harness;
pub mod model;
pub mod netsim;
pub mod ocp;
pub mod oracle;
pub mod plant;
pub mod qp;
pub mod riccati;
pub mod sparse;
