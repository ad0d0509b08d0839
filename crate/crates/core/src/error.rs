use thiserror::Error;

use crate::types::VehicleId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A car-following law was evaluated against a leader with a non-positive gap.
    #[error("degenerate input: gap {gap} m must be positive")]
    DegenerateGap { gap: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("lane {lane} does not exist (lane count {lane_count})")]
    NoSuchLane { lane: i64, lane_count: usize },

    #[error(transparent)]
    Fault(#[from] Fault),
}

/// Simulation invariant violation. Halts the run.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("invariant fault at step {step} (t = {time_s} s): {kind}; vehicles {vehicles:?}")]
pub struct Fault {
    pub step: u64,
    pub time_s: f64,
    pub kind: FaultKind,
    pub vehicles: Vec<VehicleId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FaultKind {
    Overlap { lane: usize, gap: f64 },
    PlatoonSize { size: usize, max: usize },
    Membership(String),
    Conservation { spawned: u64, present: u64, exited: u64, queued: u64 },
    UnsafeLaneChange { follower_accel: f64 },
}

impl std::fmt::Display for FaultKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FaultKind::Overlap { lane, gap } => write!(f, "overlap in lane {lane} (gap {gap:.4} m)"),
            FaultKind::PlatoonSize { size, max } => {
                write!(f, "platoon size {size} exceeds maximum {max}")
            }
            FaultKind::Membership(msg) => write!(f, "membership inconsistency: {msg}"),
            FaultKind::Conservation { spawned, present, exited, queued } => write!(
                f,
                "vehicle conservation broken: spawned {spawned} != present {present} + exited {exited} + queued {queued}"
            ),
            FaultKind::UnsafeLaneChange { follower_accel } => write!(
                f,
                "lane change left the new follower at {follower_accel:.3} m/s^2"
            ),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
