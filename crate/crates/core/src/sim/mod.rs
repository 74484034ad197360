//! Simulated distributed training with Byzantine workers.

pub mod data;
pub mod diagnostics;
pub mod model;
pub mod protocol;
pub mod rng;

pub use protocol::{rashb_run, run, two_phase_run, Method, Proposal, RunRecord, SimConfig};
