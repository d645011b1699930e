//! Task-specific inverse dynamics error-model learning.
//!
//! This crate simulates a 2D point mass whose true dynamics (mass, viscous and
//! Coulomb friction, stiction, sensing noise) differ from the approximate
//! rigid-body model used for control. A per-joint neural network learns the
//! torque error of the approximate model across repeated task executions,
//! trained from two data sources: the classic pairs measured at actual
//! accelerations and a second signal derived from a high-gain shadow feedback
//! controller, measured at desired accelerations.
//!
//! The crate is `no_std`-compatible (requires `alloc`); with default features
//! it uses the standard library float intrinsics.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("invdyn-core needs either the `std` or the `libm` feature");

pub mod control;
pub mod data;
pub mod dynamics;
pub mod experiment;
pub mod model;
pub mod rng;

mod math;

pub use control::{AccelPolicy, AdaptiveFbState, GainPair, PidState};
pub use data::{AccelKind, DataSource, Dataset, InputPoint, StepTrace, TrainingSample};
pub use dynamics::{
    ApproxRbdModel, FrictionParams, JointState, SimFault, StictionParams, TrueSystem,
};
pub use experiment::{
    AggregateGroup, ExperimentConfig, IterationRecord, RunConfig, RunMetrics, Tuning,
};
pub use model::{ErrorModel, MlpSpec, TrainReport};
pub use rng::Rng;
