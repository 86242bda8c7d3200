//! Reward labeling of trajectory datasets by entropic optimal transport
//! against expert demonstrations, followed by offline policy learning with
//! implicit Q-learning, on a planar camera-tracking task.

pub mod config;
pub mod dataset;
pub mod env;
pub mod error;
pub mod experiment;
pub mod iql;
pub mod labeler;
pub mod nn;
pub mod ot;
pub mod stats;

pub use error::{Error, Result};
