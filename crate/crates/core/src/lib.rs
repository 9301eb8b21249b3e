//! Residual action and residual feedback learning for a force-controlled
//! planar peg-in-hole task.
//!
//! The crate is layered bottom-up:
//!
//! - [`arm`]: planar serial-chain kinematics and joint-space dynamics.
//! - [`world`]: the holed surface, penalty contact, reward and episode stepping.
//! - [`controller`]: the impedance controller and its insertion state machine.
//! - [`residual`]: the residual formulations that wrap the controller.
//! - [`policy`]: the Gaussian MLP policy and its PPO optimizer.
//! - [`curriculum`]: success-rate driven adjustment of hole-pose uncertainty.
//! - [`harness`]: configuration, experiment runs, diagnostics and reports.

pub mod arm;
pub mod controller;
pub mod curriculum;
pub mod error;
pub mod harness;
pub mod policy;
pub mod residual;
pub mod rng;
pub mod world;

pub use error::{Error, Result};
