//! Metrics, reference fronts and the experiment harness.

pub mod experiment;
pub mod metrics;

pub use experiment::*;
pub use metrics::*;
