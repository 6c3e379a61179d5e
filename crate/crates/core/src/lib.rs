//! Experience-based surrogate-assisted evolutionary optimization.
//!
//! A deep-kernel Gaussian process is meta-learned across datasets drawn from
//! a family of related tasks ([`meta`]), adapted to a target task through
//! per-dimension kernel increments ([`adapt`]) and then used as the surrogate
//! of an expected-improvement optimizer ([`optimize`]). The [`bench`] module
//! holds the metrics and the experiment runner.

pub mod adapt;
pub mod bench;
pub mod deepkernel;
pub mod error;
pub mod gp;
pub mod meta;
pub mod numkit;
pub mod optim;
pub mod optimize;
pub mod tasks;

pub use error::{Error, Result};
