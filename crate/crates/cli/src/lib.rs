//! Command-line companion for the inverse-dynamics error-model learner:
//! config loading, CSV/checkpoint IO and the built-in verification checks.

pub mod checkpoint;
pub mod config;
pub mod io;
pub mod verify;
