//! Microscopic multi-lane freeway simulator with mixed human-driven and
//! cooperative automated traffic.

pub mod clustering;
pub mod demand;
pub mod engine;
pub mod error;
pub mod lateral;
pub mod longitudinal;
pub mod metrics;
pub mod road;
pub mod types;

pub use error::{Error, Fault, FaultKind, Result};
pub use types::*;
