//! Batched, differentiable, control-limited iLQR.
//!
//! The solver runs three stages per iteration (linearization, box-constrained
//! Riccati backward pass, parallel line-search forward pass). [`batchexec`]
//! executes those stages over a batch either as one parallel dispatch per
//! stage (fused) or as one dispatch per timestep and sub-operation (naive),
//! with identical floating-point results. [`gradlayer`] differentiates the
//! converged solution with respect to the cost parameters and initial state.
//!
//! All numerics are generic over [`Real`] (`f32` and `f64`); the `*64` and
//! `*32` aliases below name the common instantiations.

pub mod batchexec;
pub mod boxqp;
pub mod dynamics;
mod error;
pub mod gradlayer;
pub mod ilqr;
pub mod linalg;
pub mod qcost;
mod scalar;
pub mod scenario;

pub use batchexec::{BatchExecutor, BatchProblem, BatchSolution, DispatchMode, DispatchStats};
pub use boxqp::{boxqp, BoxQpSettings, BoxQpSolution};
pub use dynamics::{DynModel, Linearization, ModelKind, QuadrotorParams};
pub use error::{Error, Result};
pub use gradlayer::{BackwardSeed, GradOutput};
pub use ilqr::{Gains, SolveResult, SolveSettings};
pub use qcost::{StageCostParams, Trajectory, EPS_REG};
pub use scalar::Real;

pub type DynModel64 = DynModel<f64>;
pub type DynModel32 = DynModel<f32>;
pub type StageCostParams64 = StageCostParams<f64>;
pub type StageCostParams32 = StageCostParams<f32>;
pub type Trajectory64 = Trajectory<f64>;
pub type Trajectory32 = Trajectory<f32>;
pub type SolveSettings64 = SolveSettings<f64>;
pub type SolveSettings32 = SolveSettings<f32>;
pub type SolveResult64 = SolveResult<f64>;
pub type SolveResult32 = SolveResult<f32>;
pub type GradOutput64 = GradOutput<f64>;
pub type GradOutput32 = GradOutput<f32>;
pub type BatchProblem64 = BatchProblem<f64>;
pub type BatchProblem32 = BatchProblem<f32>;
