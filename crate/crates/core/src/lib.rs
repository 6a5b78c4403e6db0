//! Constraint-controlled reinforcement-learning job scheduling for renewable-powered
//! datacenters.
//!
//! The crate contains the scheduling environment ([`simenv`]), its workload and power
//! inputs, greedy baseline policies, a PID controller for the Lagrange multiplier, a small
//! hand-differentiated policy/value network and the constrained clipped policy-gradient
//! trainer that ties them together.

pub mod config;
pub mod error;
pub mod heuristics;
pub mod metrics;
pub mod neural;
pub mod pidlag;
pub mod policy;
pub mod power;
pub mod scenario;
pub mod simenv;
pub mod trainer;
pub mod workload;

pub use error::{Error, Result};
