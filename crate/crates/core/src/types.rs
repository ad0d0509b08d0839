//! Domain types shared by every part of the simulator.
//!
//! All quantities are SI (m, s, m/s, m/s²). Vehicle positions refer to the
//! front bumper, so the clearance to a leader is
//! `leader.position - leader.length - self.position`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default vehicle length for every vehicle in the fleet.
pub const DEFAULT_VEHICLE_LENGTH_M: f64 = 4.5;
/// Default speed limit, also the default desired speed (120 km/h).
pub const DEFAULT_SPEED_LIMIT_MPS: f64 = 33.3;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u64);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlatoonId(pub u64);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for PlatoonId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Monotone identifier source. One per simulation run.
#[derive(Debug, Clone, Default)]
pub struct IdAllocator {
    next: u64,
}

impl IdAllocator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allocate(&mut self) -> u64 {
        let id = self.next;
        self.next += 1;
        id
    }

    pub fn allocate_vehicle_id(&mut self) -> VehicleId {
        VehicleId(self.allocate())
    }

    pub fn allocate_platoon_id(&mut self) -> PlatoonId {
        PlatoonId(self.allocate())
    }

    /// Number of identifiers handed out so far.
    pub fn issued(&self) -> u64 {
        self.next
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VehicleClass {
    #[serde(rename = "HV")]
    Hv,
    #[serde(rename = "CAV")]
    Cav,
}

impl VehicleClass {
    pub fn as_str(self) -> &'static str {
        match self {
            VehicleClass::Hv => "HV",
            VehicleClass::Cav => "CAV",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "HV" => Some(VehicleClass::Hv),
            "CAV" => Some(VehicleClass::Cav),
            _ => None,
        }
    }
}

impl fmt::Display for VehicleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    FreeAgent,
    Leader,
    Follower,
    /// Human-driven vehicles never take part in platooning.
    NotApplicable,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::FreeAgent => "FreeAgent",
            Role::Leader => "Leader",
            Role::Follower => "Follower",
            Role::NotApplicable => "NotApplicable",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "FreeAgent" => Some(Role::FreeAgent),
            "Leader" => Some(Role::Leader),
            "Follower" => Some(Role::Follower),
            "NotApplicable" => Some(Role::NotApplicable),
            _ => None,
        }
    }

    pub fn is_platooned(self) -> bool {
        matches!(self, Role::Leader | Role::Follower)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Kinematic and classification state of one vehicle at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub id: VehicleId,
    pub class: VehicleClass,
    /// 0 is the leftmost lane.
    pub lane: usize,
    /// Front bumper, meters from the network entry.
    pub position: f64,
    pub speed: f64,
    pub accel: f64,
    pub length: f64,
    pub platoon_id: Option<PlatoonId>,
    pub role: Role,
    /// Seconds until another lane change is allowed.
    pub lane_change_cooldown: f64,
}

impl VehicleState {
    /// A fresh vehicle: HVs get `Role::NotApplicable`, CAVs start as free agents.
    pub fn new(id: VehicleId, class: VehicleClass, lane: usize, position: f64, speed: f64, length: f64) -> Self {
        let role = match class {
            VehicleClass::Hv => Role::NotApplicable,
            VehicleClass::Cav => Role::FreeAgent,
        };
        Self {
            id,
            class,
            lane,
            position,
            speed,
            accel: 0.0,
            length,
            platoon_id: None,
            role,
            lane_change_cooldown: 0.0,
        }
    }

    pub fn rear(&self) -> f64 {
        self.position - self.length
    }

    /// Bumper-to-bumper clearance from `self` to `leader`.
    pub fn gap_to(&self, leader: &VehicleState) -> f64 {
        leader.rear() - self.position
    }

    /// Checks the class/role/platoon consistency rules.
    pub fn role_consistent(&self) -> bool {
        let role_ok = match self.class {
            VehicleClass::Hv => self.role == Role::NotApplicable,
            VehicleClass::Cav => self.role != Role::NotApplicable,
        };
        role_ok && self.platoon_id.is_some() == self.role.is_platooned() && self.speed >= 0.0
    }
}

/// Car-following and lane-change parameters of one driver (human or automated).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverParams {
    #[serde(rename = "max_accel_mps2")]
    pub max_accel: f64,
    /// Comfortable (desired) deceleration, positive.
    #[serde(rename = "desired_decel_mps2")]
    pub desired_decel: f64,
    /// Free-acceleration exponent.
    #[serde(rename = "accel_exponent")]
    pub accel_exponent: f64,
    #[serde(rename = "desired_speed_mps")]
    pub desired_speed: f64,
    /// Standstill bumper-to-bumper gap.
    #[serde(rename = "min_gap_m")]
    pub min_gap: f64,
    #[serde(rename = "time_gap_s")]
    pub time_gap: f64,
    /// Blend weight of the constant-acceleration heuristic; 0 is plain IDM.
    pub coolness: f64,
    pub politeness: f64,
    /// Largest deceleration a lane change may impose on anyone.
    #[serde(rename = "safe_decel_mps2")]
    pub safe_decel: f64,
    /// Minimum net advantage before a discretionary lane change.
    #[serde(rename = "change_threshold_mps2")]
    pub change_threshold: f64,
}

impl DriverParams {
    pub fn human() -> Self {
        Self {
            max_accel: 1.4,
            desired_decel: 2.0,
            accel_exponent: 4.0,
            desired_speed: DEFAULT_SPEED_LIMIT_MPS,
            min_gap: 2.0,
            time_gap: 1.5,
            coolness: 0.0,
            politeness: 0.3,
            safe_decel: 4.0,
            change_threshold: 0.1,
        }
    }

    pub fn automated() -> Self {
        Self { coolness: 0.99, ..Self::human() }
    }

    pub fn with_time_gap(mut self, time_gap: f64) -> Self {
        self.time_gap = time_gap;
        self
    }

    pub fn with_desired_speed(mut self, desired_speed: f64) -> Self {
        self.desired_speed = desired_speed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.max_accel > 0.0, "max_accel_mps2 must be > 0"),
            (self.desired_decel > 0.0, "desired_decel_mps2 must be > 0"),
            (self.accel_exponent > 0.0, "accel_exponent must be > 0"),
            (self.desired_speed > 0.0, "desired_speed_mps must be > 0"),
            (self.min_gap > 0.0, "min_gap_m must be > 0"),
            (self.time_gap > 0.0, "time_gap_s must be > 0"),
            ((0.0..=1.0).contains(&self.coolness), "coolness must lie in [0, 1]"),
            (self.politeness >= 0.0, "politeness must be >= 0"),
            (self.safe_decel > 0.0, "safe_decel_mps2 must be > 0"),
            (self.change_threshold >= 0.0, "change_threshold_mps2 must be >= 0"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::InvalidConfig((*msg).to_string())),
            None => Ok(()),
        }
    }
}

impl Default for DriverParams {
    fn default() -> Self {
        Self::human()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum JoinType {
    Front,
    Mid,
    Rear,
}

/// Platooning parameters shared by all CAVs of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaccParams {
    /// Time gap behind the preceding member of the own platoon.
    #[serde(rename = "follower_time_gap_s")]
    pub follower_time_gap: f64,
    /// Time gap of platoon leaders and free agents.
    #[serde(rename = "leader_time_gap_s")]
    pub leader_time_gap: f64,
    pub max_platoon_size: usize,
    #[serde(rename = "comm_range_m")]
    pub comm_range: f64,
    pub preferential_lane: usize,
    pub join_types_enabled: Vec<JoinType>,
    #[serde(rename = "join_deadline_s")]
    pub join_deadline: f64,
    /// Cap on the speed advantage a joining vehicle takes over its target.
    #[serde(rename = "approach_speed_margin_mps")]
    pub approach_speed_margin: f64,
    /// Extra clearance beyond `min_gap + v * leader_time_gap` within which a
    /// CAV directly behind another CAV couples to it without any maneuver.
    #[serde(rename = "coupling_margin_m")]
    pub coupling_margin: f64,
    /// Wait after an aborted join before scanning again.
    #[serde(rename = "join_retry_backoff_s")]
    pub join_retry_backoff: f64,
}

impl Default for CaccParams {
    fn default() -> Self {
        Self {
            follower_time_gap: 0.6,
            leader_time_gap: 1.1,
            max_platoon_size: 10,
            comm_range: 300.0,
            preferential_lane: 0,
            join_types_enabled: vec![JoinType::Front, JoinType::Rear],
            join_deadline: 30.0,
            approach_speed_margin: 3.0,
            coupling_margin: 20.0,
            join_retry_backoff: 10.0,
        }
    }
}

impl CaccParams {
    pub fn join_enabled(&self, kind: JoinType) -> bool {
        self.join_types_enabled.contains(&kind)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.follower_time_gap > 0.0 && self.follower_time_gap <= self.leader_time_gap) {
            return invalid("cacc requires 0 < follower_time_gap_s <= leader_time_gap_s");
        }
        if self.max_platoon_size < 2 {
            return invalid("cacc max_platoon_size must be >= 2");
        }
        if self.comm_range <= 0.0 {
            return invalid("cacc comm_range_m must be > 0");
        }
        if self.join_deadline <= 0.0 || self.approach_speed_margin < 0.0 {
            return invalid("cacc join_deadline_s must be > 0 and approach_speed_margin_mps >= 0");
        }
        if self.coupling_margin < 0.0 || self.join_retry_backoff < 0.0 {
            return invalid("cacc coupling_margin_m and join_retry_backoff_s must be >= 0");
        }
        Ok(())
    }
}

/// Membership record of one platoon.
#[derive(Debug, Clone, PartialEq)]
pub struct Platoon {
    pub id: PlatoonId,
    pub leader_id: VehicleId,
    /// Front to back; `member_ids[0] == leader_id`.
    pub member_ids: Vec<VehicleId>,
    pub lane: usize,
    pub dissolving: bool,
}

impl Platoon {
    pub fn new(id: PlatoonId, member_ids: Vec<VehicleId>, lane: usize) -> Self {
        Self { id, leader_id: member_ids[0], member_ids, lane, dissolving: false }
    }

    pub fn size(&self) -> usize {
        self.member_ids.len()
    }

    pub fn tail(&self) -> VehicleId {
        *self.member_ids.last().expect("platoon has members")
    }

    pub fn index_of(&self, id: VehicleId) -> Option<usize> {
        self.member_ids.iter().position(|&m| m == id)
    }

    /// Member directly in front of `id`, if any.
    pub fn predecessor_of(&self, id: VehicleId) -> Option<VehicleId> {
        match self.index_of(id) {
            Some(i) if i > 0 => Some(self.member_ids[i - 1]),
            _ => None,
        }
    }
}

/// One log row, written every logging interval for every vehicle on the road.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub time: f64,
    pub vehicle_id: VehicleId,
    pub class: VehicleClass,
    pub lane: usize,
    pub position: f64,
    pub speed: f64,
    pub accel: f64,
    pub platoon_id: Option<PlatoonId>,
    pub role: Role,
    /// Vehicle immediately ahead in the same lane.
    pub leader_id: Option<VehicleId>,
    pub leader_class: Option<VehicleClass>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Spawn,
    /// Left through the downstream boundary.
    Exit,
    OffRampExit,
    /// Discretionary lane change.
    LaneChange,
    /// Lane change forced by routing (off-ramp approach); excluded from metrics.
    MandatoryLaneChange,
    JoinCompleted,
    JoinAborted,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Spawn => "spawn",
            EventKind::Exit => "exit",
            EventKind::OffRampExit => "offramp_exit",
            EventKind::LaneChange => "lane_change",
            EventKind::MandatoryLaneChange => "mandatory_lane_change",
            EventKind::JoinCompleted => "join_completed",
            EventKind::JoinAborted => "join_aborted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            EventKind::Spawn,
            EventKind::Exit,
            EventKind::OffRampExit,
            EventKind::LaneChange,
            EventKind::MandatoryLaneChange,
            EventKind::JoinCompleted,
            EventKind::JoinAborted,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
    }
}

/// Entry of the event log.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    pub vehicle_id: VehicleId,
    pub class: VehicleClass,
    pub kind: EventKind,
    pub from_lane: usize,
    pub to_lane: usize,
    pub platoon_id: Option<PlatoonId>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Human traffic only.
    Base,
    /// CAVs platoon only when they happen to drive behind one another.
    AdHoc,
    /// Free agents actively seek platoons and platoons drift to the preferential lane.
    Local,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Base => "Base",
            Strategy::AdHoc => "AdHoc",
            Strategy::Local => "Local",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Optional on-ramp/off-ramp pair on the rightmost lane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampConfig {
    pub on_ramp_position_m: f64,
    pub on_ramp_demand_vph: f64,
    pub off_ramp_position_m: f64,
    /// Share of mainline arrivals that leave at the off-ramp.
    pub off_ramp_share: f64,
    /// Distance upstream of the off-ramp where exiting vehicles start moving right.
    pub off_ramp_approach_m: f64,
}

impl Default for RampConfig {
    fn default() -> Self {
        Self {
            on_ramp_position_m: 2000.0,
            on_ramp_demand_vph: 600.0,
            off_ramp_position_m: 6000.0,
            off_ramp_share: 0.1,
            off_ramp_approach_m: 1500.0,
        }
    }
}

/// Full description of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub strategy: Strategy,
    /// Share of arrivals that are CAVs.
    pub mpr: f64,
    pub demand_vph: f64,
    pub lane_count: usize,
    pub length_m: f64,
    pub duration_s: f64,
    pub warmup_s: f64,
    pub dt_s: f64,
    pub log_dt_s: f64,
    pub seed: u64,
    pub hv_params: DriverParams,
    pub cav_params: DriverParams,
    pub cacc: CaccParams,
    pub vehicle_length_m: f64,
    pub lane_change_cooldown_s: f64,
    pub entry_speed_mps: f64,
    /// Human desired speeds are drawn uniformly from `v_des * (1 ± spread)`.
    pub desired_speed_spread: f64,
    pub ramps: Option<RampConfig>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Base,
            mpr: 0.0,
            demand_vph: 8000.0,
            lane_count: 4,
            length_m: 8000.0,
            duration_s: 3900.0,
            warmup_s: 300.0,
            dt_s: 0.1,
            log_dt_s: 0.5,
            seed: 1,
            hv_params: DriverParams::human(),
            cav_params: DriverParams::automated(),
            cacc: CaccParams::default(),
            vehicle_length_m: DEFAULT_VEHICLE_LENGTH_M,
            lane_change_cooldown_s: 4.0,
            entry_speed_mps: DEFAULT_SPEED_LIMIT_MPS,
            desired_speed_spread: 0.1,
            ramps: None,
        }
    }
}

impl ScenarioConfig {
    /// Number of integration steps between two log instants.
    pub fn steps_per_log(&self) -> u64 {
        (self.log_dt_s / self.dt_s).round() as u64
    }

    pub fn total_steps(&self) -> u64 {
        (self.duration_s / self.dt_s).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0..=1.0).contains(&self.mpr) {
            return invalid(format!("mpr {} must lie in [0, 1]", self.mpr));
        }
        if self.strategy == Strategy::Base && self.mpr != 0.0 {
            return invalid(format!("strategy Base requires mpr = 0 (got {})", self.mpr));
        }
        if self.lane_count == 0 {
            return invalid("lane_count must be >= 1".into());
        }
        if !(self.length_m > 0.0) || !(self.demand_vph >= 0.0) {
            return invalid("length_m must be > 0 and demand_vph >= 0".into());
        }
        if !(self.dt_s > 0.0) || !(self.log_dt_s > 0.0) {
            return invalid("dt_s and log_dt_s must be > 0".into());
        }
        let ratio = self.log_dt_s / self.dt_s;
        if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-9 {
            return invalid(format!("dt_s {} must divide log_dt_s {}", self.dt_s, self.log_dt_s));
        }
        let duration_steps = self.duration_s / self.dt_s;
        if (duration_steps - duration_steps.round()).abs() > 1e-6 {
            return invalid("duration_s must be a multiple of dt_s".into());
        }
        if !(self.warmup_s >= 0.0 && self.warmup_s < self.duration_s) {
            return invalid(format!(
                "warmup_s {} must be >= 0 and < duration_s {}",
                self.warmup_s, self.duration_s
            ));
        }
        if !(self.vehicle_length_m > 0.0) || !(self.entry_speed_mps > 0.0) {
            return invalid("vehicle_length_m and entry_speed_mps must be > 0".into());
        }
        if self.lane_change_cooldown_s < 0.0 {
            return invalid("lane_change_cooldown_s must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.desired_speed_spread) {
            return invalid("desired_speed_spread must lie in [0, 1)".into());
        }
        if self.cacc.preferential_lane >= self.lane_count {
            return invalid(format!(
                "preferential_lane {} outside lane range 0..{}",
                self.cacc.preferential_lane, self.lane_count
            ));
        }
        self.hv_params.validate()?;
        self.cav_params.validate()?;
        self.cacc.validate()?;
        if let Some(r) = &self.ramps {
            let inside = |x: f64| x > 0.0 && x < self.length_m;
            if !inside(r.on_ramp_position_m) || !inside(r.off_ramp_position_m) {
                return invalid("ramp positions must lie strictly inside the segment".into());
            }
            if !(0.0..=1.0).contains(&r.off_ramp_share) || r.on_ramp_demand_vph < 0.0 {
                return invalid("off_ramp_share must lie in [0, 1] and on_ramp_demand_vph >= 0".into());
            }
            if r.off_ramp_approach_m <= 0.0 {
                return invalid("off_ramp_approach_m must be > 0".into());
            }
        }
        Ok(())
    }
}
