//! Simulation, reconstruction models and experiment harness for recovering
//! the temporal evolution of SIRS epidemics on graphs from per-node
//! aggregated observations.

pub mod baselines;
pub mod ddmix;
pub mod error;
pub mod graph;
pub mod harness;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sirs;

pub use error::{Error, Result};
pub use graph::Graph;
pub use model::{Model, ModelKind};
