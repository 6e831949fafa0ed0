//! Truncated-trajectory Monte Carlo estimation for discounted RL.
//!
//! A fixed transition budget can be spent on episodes of different lengths.
//! This crate computes the schedule (data collection strategy) that minimises
//! the Hoeffding confidence width of the truncated return estimator, provides
//! on-/off-policy estimators with their confidence bounds, and implements the
//! TT-POIS policy optimiser that uses those bounds as a trust region.
//!
//! Modules:
//! - [`schedule`]: coefficients, closed-form relaxed solution, rounding, PAC calculator.
//! - [`estimators`]: batch collection and the truncated estimators.
//! - [`policies`]: softmax / tanh-MLP discrete policies with manual gradients.
//! - [`envs`]: milestone, corridor, dam and final-reward chain simulators.
//! - [`ttpois`]: surrogate objective, its gradient, line search and the optimisation loop.

pub mod envs;
pub mod error;
pub mod estimators;
pub mod policies;
pub mod rng;
pub mod schedule;
pub mod ttpois;

pub use envs::{EnvConfig, EnvState, Environment};
pub use error::{Error, Result};
pub use estimators::{EstimateReport, Trajectory, TruncatedBatch};
pub use policies::{Architecture, FeatureMap, PolicyParams};
pub use schedule::{Coefficients, Dcs, PacReport, RelaxedSolution};
pub use ttpois::{DcsMode, IterationLog, OptimConfig, RunResult};
