//! Byzantine-resilient aggregation built on clustering with outliers.
//!
//! The crate provides exact and approximate outlier clustering, a family of
//! aggregation rules, attack generators, an exhaustive robustness lab, and a
//! simulator for distributed heavy-ball training with a two-phase voting
//! protocol.

pub mod aggregators;
pub mod attacks;
pub mod clustering;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod robustness;
pub mod sim;

pub use aggregators::{aggregate, AggregatorSpec};
pub use attacks::{AttackSpec, Vote};
pub use clustering::{ClusterObjective, ClusterSolution};
pub use error::{Error, Result};
pub use geometry::{Ball, VectorSet};
