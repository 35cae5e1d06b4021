//! Differentiable building blocks shared by every model.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{Activation, GUNetBlock, GraphContext, PoolConnectivity, PoolRecord};
pub use params::{adam_step, AdamConfig, OptimizerState, ParameterStore};
pub use tape::{Mat, Tape, Var};
