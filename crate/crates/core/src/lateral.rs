//! Discretionary lane changes (MOBIL) and the gap-acceptance check shared
//! with CAV join maneuvers.

use crate::error::{Error, Result};
use crate::longitudinal::{idm_accel, LeaderView};
use crate::types::{DriverParams, Event, EventKind, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    /// Lane reached from `lane`, if it exists. Lane 0 is the leftmost.
    pub fn target_lane(self, lane: usize, lane_count: usize) -> Option<usize> {
        match self {
            Side::Left => lane.checked_sub(1),
            Side::Right => (lane + 1 < lane_count).then_some(lane + 1),
        }
    }

    /// Side that moves from `from` one lane toward `to`.
    pub fn toward(from: usize, to: usize) -> Option<Side> {
        match to.cmp(&from) {
            std::cmp::Ordering::Less => Some(Side::Left),
            std::cmp::Ordering::Greater => Some(Side::Right),
            std::cmp::Ordering::Equal => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneDecision {
    Stay,
    Left,
    Right,
}

impl From<Side> for LaneDecision {
    fn from(side: Side) -> Self {
        match side {
            Side::Left => LaneDecision::Left,
            Side::Right => LaneDecision::Right,
        }
    }
}

/// A vehicle seen behind the subject, with the parameters it drives by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowerView {
    /// Clearance from the follower's front to the subject's rear.
    pub gap: f64,
    pub speed: f64,
    pub accel: f64,
    pub params: DriverParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LaneNeighbors {
    pub leader: Option<LeaderView>,
    pub follower: Option<FollowerView>,
}

/// Neighbors of a subject in its own lane and both adjacent lanes.
/// `None` for a side lane means the road ends there.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NeighborSet {
    pub current: LaneNeighbors,
    pub left: Option<LaneNeighbors>,
    pub right: Option<LaneNeighbors>,
}

impl NeighborSet {
    pub fn side(&self, side: Side) -> Option<&LaneNeighbors> {
        match side {
            Side::Left => self.left.as_ref(),
            Side::Right => self.right.as_ref(),
        }
    }
}

/// Leader of a follower once the vehicle between them is gone.
fn bridged(follower_gap: f64, subject_length: f64, leader: Option<&LeaderView>) -> Option<LeaderView> {
    leader.map(|l| LeaderView::new(follower_gap + subject_length + l.gap, l.speed, l.accel))
}

/// MOBIL incentive of moving into `target`; `None` if the move is unsafe or
/// any involved gap is non-positive.
fn incentive(subject: &VehicleState, current: &LaneNeighbors, target: &LaneNeighbors, p: &DriverParams) -> Option<f64> {
    let v = subject.speed;
    let own_before = idm_accel(v, current.leader.as_ref(), p).ok()?;
    let own_after = idm_accel(v, target.leader.as_ref(), p).ok()?;

    let mut others = 0.0;
    if let Some(n) = &target.follower {
        let before = idm_accel(n.speed, bridged(n.gap, subject.length, target.leader.as_ref()).as_ref(), &n.params).ok()?;
        let after = idm_accel(n.speed, Some(&LeaderView::new(n.gap, v, subject.accel)), &n.params).ok()?;
        if after < -p.safe_decel {
            return None;
        }
        others += after - before;
    }
    if let Some(o) = &current.follower {
        let before = idm_accel(o.speed, Some(&LeaderView::new(o.gap, v, subject.accel)), &o.params).ok()?;
        let after = idm_accel(o.speed, bridged(o.gap, subject.length, current.leader.as_ref()).as_ref(), &o.params).ok()?;
        others += after - before;
    }
    Some(own_after - own_before + p.politeness * others)
}

/// Discretionary lane-change decision. Ties between the two sides go right.
pub fn mobil_decision(subject: &VehicleState, nbrs: &NeighborSet, p: &DriverParams) -> LaneDecision {
    if subject.lane_change_cooldown > 0.0 {
        return LaneDecision::Stay;
    }
    let gain = |side: Side| {
        nbrs.side(side)
            .and_then(|target| incentive(subject, &nbrs.current, target, p))
            .filter(|&g| g > p.change_threshold)
    };
    match (gain(Side::Left), gain(Side::Right)) {
        (None, None) => LaneDecision::Stay,
        (Some(_), None) => LaneDecision::Left,
        (None, Some(_)) => LaneDecision::Right,
        (Some(l), Some(r)) => {
            if l > r {
                LaneDecision::Left
            } else {
                LaneDecision::Right
            }
        }
    }
}

/// Whether the subject can slot in between `target_leader` and
/// `target_follower` without forcing anyone to brake harder than `safe_decel`.
pub fn gap_acceptable(
    subject_speed: f64,
    target_leader: Option<&LeaderView>,
    target_follower: Option<&FollowerView>,
    p: &DriverParams,
    safe_decel: f64,
) -> bool {
    let leader_ok = target_leader.is_none_or(|l| {
        l.gap >= p.min_gap
            && idm_accel(subject_speed, Some(l), p).is_ok_and(|a| a >= -safe_decel)
    });
    let follower_ok = target_follower.is_none_or(|f| {
        f.gap >= p.min_gap
            && idm_accel(f.speed, Some(&LeaderView::new(f.gap, subject_speed, 0.0)), &f.params)
                .is_ok_and(|a| a >= -safe_decel)
    });
    leader_ok && follower_ok
}

/// Moves the subject one lane to `side`. Position and speed are unchanged.
pub fn execute_lane_change(
    subject: &VehicleState,
    side: Side,
    lane_count: usize,
    cooldown_s: f64,
    time: f64,
    mandatory: bool,
) -> Result<(VehicleState, Event)> {
    let to = side.target_lane(subject.lane, lane_count).ok_or(Error::NoSuchLane {
        lane: match side {
            Side::Left => subject.lane as i64 - 1,
            Side::Right => subject.lane as i64 + 1,
        },
        lane_count,
    })?;
    let mut moved = subject.clone();
    moved.lane = to;
    moved.lane_change_cooldown = cooldown_s;
    let event = Event {
        time,
        vehicle_id: subject.id,
        class: subject.class,
        kind: if mandatory { EventKind::MandatoryLaneChange } else { EventKind::LaneChange },
        from_lane: subject.lane,
        to_lane: to,
        platoon_id: subject.platoon_id,
    };
    Ok((moved, event))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{VehicleClass, VehicleId};

    fn subject(lane: usize, speed: f64) -> VehicleState {
        VehicleState::new(VehicleId(1), VehicleClass::Hv, lane, 500.0, speed, 4.5)
    }

    fn open_lanes() -> NeighborSet {
        NeighborSet {
            current: LaneNeighbors::default(),
            left: Some(LaneNeighbors::default()),
            right: Some(LaneNeighbors::default()),
        }
    }

    fn p() -> DriverParams {
        DriverParams::human()
    }

    #[test]
    fn empty_road_stays() {
        assert_eq!(mobil_decision(&subject(1, 20.0), &open_lanes(), &p()), LaneDecision::Stay);
    }

    #[test]
    fn stopped_leader_triggers_left_move() {
        let mut nbrs = open_lanes();
        nbrs.current.leader = Some(LeaderView::new(30.0, 0.0, 0.0));
        nbrs.right = None;
        let s = subject(1, 20.0);
        // Oracle: current IDM accel against the stopped leader vs free road.
        let before = idm_accel(20.0, nbrs.current.leader.as_ref(), &p()).unwrap();
        let after = idm_accel(20.0, None, &p()).unwrap();
        assert!(after - before > 5.0);
        assert_eq!(mobil_decision(&s, &nbrs, &p()), LaneDecision::Left);
    }

    #[test]
    fn unsafe_new_follower_vetoes() {
        let mut nbrs = open_lanes();
        nbrs.current.leader = Some(LeaderView::new(30.0, 0.0, 0.0));
        nbrs.right = None;
        nbrs.left = Some(LaneNeighbors {
            leader: None,
            follower: Some(FollowerView { gap: 8.0, speed: 35.0, accel: 0.0, params: p() }),
        });
        assert_eq!(mobil_decision(&subject(1, 20.0), &nbrs, &p()), LaneDecision::Stay);
    }

    #[test]
    fn cooldown_blocks_decision() {
        let mut nbrs = open_lanes();
        nbrs.current.leader = Some(LeaderView::new(30.0, 0.0, 0.0));
        let mut s = subject(1, 20.0);
        s.lane_change_cooldown = 1.0;
        assert_eq!(mobil_decision(&s, &nbrs, &p()), LaneDecision::Stay);
    }

    #[test]
    fn equal_gain_breaks_right() {
        let mut nbrs = open_lanes();
        nbrs.current.leader = Some(LeaderView::new(30.0, 0.0, 0.0));
        assert_eq!(mobil_decision(&subject(1, 20.0), &nbrs, &p()), LaneDecision::Right);
    }

    #[test]
    fn mirrored_environment_below_threshold_stays() {
        let side = LaneNeighbors {
            leader: Some(LeaderView::new(60.0, 20.0, 0.0)),
            follower: Some(FollowerView { gap: 40.0, speed: 20.0, accel: 0.0, params: p() }),
        };
        let nbrs = NeighborSet {
            current: LaneNeighbors { leader: Some(LeaderView::new(60.0, 20.0, 0.0)), follower: None },
            left: Some(side),
            right: Some(side),
        };
        assert_eq!(mobil_decision(&subject(1, 20.0), &nbrs, &p()), LaneDecision::Stay);
    }

    #[test]
    fn gap_acceptance_cases() {
        let pp = p();
        assert!(gap_acceptable(20.0, None, None, &pp, 4.0));
        let close = FollowerView { gap: 1.0, speed: 20.0, accel: 0.0, params: pp };
        assert!(!gap_acceptable(20.0, None, Some(&close), &pp, 4.0));
        let ahead = LeaderView::new(30.0, 20.0, 0.0);
        // oracle: IDM against a 30 m equal-speed leader brakes mildly
        let a = idm_accel(20.0, Some(&ahead), &pp).unwrap();
        assert!(a < 0.0 && a > -4.0);
        assert!(gap_acceptable(20.0, Some(&ahead), None, &pp, 4.0));
        let tight = LeaderView::new(3.0, 10.0, 0.0);
        assert!(!gap_acceptable(20.0, Some(&tight), None, &pp, 4.0));
    }

    #[test]
    fn lane_change_execution() {
        let (moved, ev) = execute_lane_change(&subject(2, 20.0), Side::Left, 4, 4.0, 12.5, false).unwrap();
        assert_eq!(moved.lane, 1);
        assert_eq!(moved.lane_change_cooldown, 4.0);
        assert_eq!(moved.position, 500.0);
        assert_eq!((ev.from_lane, ev.to_lane, ev.kind), (2, 1, EventKind::LaneChange));
        assert!(execute_lane_change(&subject(0, 20.0), Side::Left, 4, 4.0, 0.0, false).is_err());
        let (moved, _) = execute_lane_change(&subject(0, 20.0), Side::Right, 4, 4.0, 0.0, false).unwrap();
        assert_eq!(moved.lane, 1);
        assert!(execute_lane_change(&subject(3, 20.0), Side::Right, 4, 4.0, 0.0, false).is_err());
    }
}
