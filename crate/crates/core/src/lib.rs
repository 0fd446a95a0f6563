//! Disentangled counterfactual regression with mutual-information
//! minimization, plus uplift evaluation and budget-constrained targeting.

pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod targeting;
pub mod training;

pub use error::{Error, Result};

/// Version stamped into every JSON report and sidecar.
pub const SCHEMA_VERSION: u32 = 1;
