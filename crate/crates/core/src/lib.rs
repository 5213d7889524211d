//! Preference-based reinforcement learning with attention-guided credit
//! assignment.
//!
//! A reward ensemble is learned from pairwise segment preferences. A
//! transformer forward-dynamics model supplies per-timestep attention that
//! is used to redistribute each segment's predicted return into per-step
//! reward targets, added to the preference loss as an auxiliary objective.

pub mod diffcore;
pub mod agent;
pub mod credit;
pub mod data;
pub mod envs;
pub mod error;
pub mod oracle;
pub mod reward;
pub mod runner;
pub mod worldmodel;

pub use error::{Error, Result};
