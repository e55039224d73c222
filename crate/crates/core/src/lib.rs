//! Predictive safety filters for disturbed discrete-time systems.

pub mod bench;
pub mod config;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod grid;
pub mod learn;
pub mod model;
pub mod policy;
pub mod polytope;
pub mod sls;

pub use error::{Error, Result};
