//! Estimation, prediction and counterfactual simulation of individual
//! treatment effects of team contests on driver productivity.

pub mod config;
pub mod did;
pub mod error;
pub mod eval;
pub mod features;
pub mod models;
pub mod pipeline;
pub mod simulate;
pub mod stats;
pub mod synthgen;
pub mod types;

pub use error::{Error, Result};
