//! Actor-critic reinforcement learning with a differentiable MPC actor.
//!
//! [`policy`] holds the networks and the MPC-backed action head, [`raceenv`]
//! the planar gate-racing task, and [`trainer`] the PPO loop that pushes
//! policy gradients through the MPC solution via implicit differentiation.

pub mod adam;
pub mod checkpoint;
mod error;
pub mod mlp;
pub mod policy;
pub mod raceenv;
mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use mlp::Mlp;
pub use policy::{CostHeadScaling, MlpSpec, MpcLayer, Policy, PolicyAction};
pub use raceenv::{DoneReason, EnvState, RaceConfig, RaceEnv, TrackSpec};
pub use scalar::Scalar;
pub use trainer::{gae, RolloutBuffer, TrainConfig, TrainMode, UpdateMetrics};

pub type Policy32 = Policy<f32>;
pub type Policy64 = Policy<f64>;
pub type RaceEnv32 = RaceEnv<f32>;
pub type RaceEnv64 = RaceEnv<f64>;
