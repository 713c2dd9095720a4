//! Federated-learning simulation and gradient-leakage attack laboratory.

pub mod attack;
pub mod comms;
pub mod data;
pub mod error;
pub mod fl;
pub mod harness;
pub mod metrics;
pub mod mitigation;
pub mod model;
pub mod seed;
pub mod tensor;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
