//! Per-lane ordering of the vehicles on the road and neighbor queries.

use crate::lateral::{FollowerView, LaneNeighbors, NeighborSet};
use crate::longitudinal::LeaderView;
use crate::types::{DriverParams, VehicleId, VehicleState};

/// Where a vehicle is headed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Through,
    OffRamp,
}

/// A vehicle on the road together with its own driving parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub state: VehicleState,
    /// Personal parameters (desired speed may differ between drivers).
    pub params: DriverParams,
    pub route: Route,
    /// No join scan before this time.
    pub join_backoff_until: f64,
}

impl Agent {
    pub fn new(state: VehicleState, params: DriverParams) -> Self {
        Self { state, params, route: Route::Through, join_backoff_until: 0.0 }
    }
}

/// Vehicles of each lane ordered front to back, as indices into an agent slice.
#[derive(Debug, Clone, Default)]
pub struct LaneIndex {
    lanes: Vec<Vec<usize>>,
    /// Lane and rank of each agent at build time.
    slot: Vec<(usize, usize)>,
}

fn front_to_back(agents: &[Agent], a: usize, b: usize) -> std::cmp::Ordering {
    let (sa, sb) = (&agents[a].state, &agents[b].state);
    sb.position.total_cmp(&sa.position).then(sa.id.cmp(&sb.id))
}

impl LaneIndex {
    pub fn build(agents: &[Agent], lane_count: usize) -> Self {
        let mut lanes = vec![Vec::new(); lane_count];
        for (i, a) in agents.iter().enumerate() {
            lanes[a.state.lane].push(i);
        }
        let mut slot = vec![(0, 0); agents.len()];
        for (l, lane) in lanes.iter_mut().enumerate() {
            lane.sort_by(|&a, &b| front_to_back(agents, a, b));
            for (rank, &i) in lane.iter().enumerate() {
                slot[i] = (l, rank);
            }
        }
        Self { lanes, slot }
    }

    pub fn lane_count(&self) -> usize {
        self.lanes.len()
    }

    pub fn lane(&self, lane: usize) -> &[usize] {
        &self.lanes[lane]
    }

    /// Immediate leader in the same lane. Only valid before `relocate`.
    pub fn leader(&self, i: usize) -> Option<usize> {
        let (l, r) = self.slot[i];
        r.checked_sub(1).map(|r| self.lanes[l][r])
    }

    /// Immediate follower in the same lane. Only valid before `relocate`.
    pub fn follower(&self, i: usize) -> Option<usize> {
        let (l, r) = self.slot[i];
        self.lanes[l].get(r + 1).copied()
    }

    /// Nearest vehicle strictly ahead of `position` and nearest one at or
    /// behind it in `lane`, ignoring `exclude`.
    pub fn around(&self, agents: &[Agent], lane: usize, position: f64, exclude: Option<usize>) -> (Option<usize>, Option<usize>) {
        let list = &self.lanes[lane];
        let k = list.partition_point(|&j| agents[j].state.position > position);
        let leader = list[..k].iter().rev().copied().find(|&j| Some(j) != exclude);
        let follower = list[k..].iter().copied().find(|&j| Some(j) != exclude);
        (leader, follower)
    }

    /// Vehicles of `lane` with front bumper in `[lo, hi]`, front to back.
    pub fn within(&self, agents: &[Agent], lane: usize, lo: f64, hi: f64) -> &[usize] {
        let list = &self.lanes[lane];
        let start = list.partition_point(|&j| agents[j].state.position > hi);
        let end = list.partition_point(|&j| agents[j].state.position >= lo);
        &list[start..end.max(start)]
    }

    /// Moves agent `i` (whose state still shows the old lane) into `to`.
    /// Ranks from `build` are stale afterwards; only `around`/`within` remain valid.
    pub fn relocate(&mut self, agents: &[Agent], i: usize, from: usize, to: usize) {
        if let Some(k) = self.lanes[from].iter().position(|&j| j == i) {
            self.lanes[from].remove(k);
        }
        let list = &self.lanes[to];
        let k = list.partition_point(|&j| front_to_back(agents, j, i).is_lt());
        self.lanes[to].insert(k, i);
    }

    /// Smallest clearance between consecutive vehicles, with the pair.
    pub fn tightest_gap(&self, agents: &[Agent]) -> Option<(usize, f64, usize, usize)> {
        let mut worst: Option<(usize, f64, usize, usize)> = None;
        for (l, lane) in self.lanes.iter().enumerate() {
            for w in lane.windows(2) {
                let gap = agents[w[1]].state.gap_to(&agents[w[0]].state);
                if worst.is_none_or(|(_, g, _, _)| gap < g) {
                    worst = Some((l, gap, w[0], w[1]));
                }
            }
        }
        worst
    }
}

/// Immutable view of the road used by all decision phases of one step.
pub struct Road<'a> {
    pub agents: &'a [Agent],
    pub index: &'a LaneIndex,
}

impl<'a> Road<'a> {
    pub fn new(agents: &'a [Agent], index: &'a LaneIndex) -> Self {
        Self { agents, index }
    }

    pub fn lane_count(&self) -> usize {
        self.index.lane_count()
    }

    pub fn state(&self, i: usize) -> &'a VehicleState {
        &self.agents[i].state
    }

    /// Agents are kept sorted by id.
    pub fn index_of(&self, id: VehicleId) -> Option<usize> {
        self.agents.binary_search_by_key(&id, |a| a.state.id).ok()
    }

    pub fn by_id(&self, id: VehicleId) -> Option<&'a VehicleState> {
        self.index_of(id).map(|i| &self.agents[i].state)
    }

    pub fn leader(&self, i: usize) -> Option<usize> {
        self.index.leader(i)
    }

    pub fn follower(&self, i: usize) -> Option<usize> {
        self.index.follower(i)
    }

    pub fn view_of_leader(&self, subject: &VehicleState, leader: usize) -> LeaderView {
        let l = self.state(leader);
        LeaderView::new(subject.gap_to(l), l.speed, l.accel)
    }

    pub fn view_of_follower(&self, subject: &VehicleState, follower: usize, params: &DriverParams) -> FollowerView {
        let f = self.state(follower);
        FollowerView { gap: f.gap_to(subject), speed: f.speed, accel: f.accel, params: *params }
    }

    pub fn leader_view(&self, i: usize) -> Option<LeaderView> {
        self.leader(i).map(|l| self.view_of_leader(self.state(i), l))
    }

    /// Neighbors of `subject` if it were in `lane` at its current position.
    /// `params` holds the effective parameters of every agent.
    pub fn neighbors_in_lane(&self, subject: usize, lane: usize, params: &[DriverParams]) -> LaneNeighbors {
        let s = self.state(subject);
        let (leader, follower) = self.index.around(self.agents, lane, s.position, Some(subject));
        LaneNeighbors {
            leader: leader.map(|l| self.view_of_leader(s, l)),
            follower: follower.map(|f| self.view_of_follower(s, f, &params[f])),
        }
    }

    pub fn neighbor_set(&self, subject: usize, params: &[DriverParams]) -> NeighborSet {
        let lane = self.state(subject).lane;
        let lanes = self.lane_count();
        NeighborSet {
            current: self.neighbors_in_lane(subject, lane, params),
            left: lane.checked_sub(1).map(|l| self.neighbors_in_lane(subject, l, params)),
            right: (lane + 1 < lanes).then(|| self.neighbors_in_lane(subject, lane + 1, params)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::VehicleClass;

    fn agent(id: u64, lane: usize, pos: f64) -> Agent {
        Agent::new(
            VehicleState::new(VehicleId(id), VehicleClass::Hv, lane, pos, 20.0, 4.5),
            DriverParams::human(),
        )
    }

    #[test]
    fn ordering_and_neighbors() {
        let agents = vec![agent(0, 0, 100.0), agent(1, 0, 200.0), agent(2, 1, 150.0), agent(3, 0, 50.0)];
        let idx = LaneIndex::build(&agents, 2);
        assert_eq!(idx.lane(0), &[1, 0, 3]);
        assert_eq!(idx.leader(0), Some(1));
        assert_eq!(idx.follower(0), Some(3));
        assert_eq!(idx.leader(1), None);
        assert_eq!(idx.around(&agents, 0, 150.0, None), (Some(1), Some(0)));
        assert_eq!(idx.around(&agents, 0, 100.0, Some(0)), (Some(1), Some(3)));
        assert_eq!(idx.within(&agents, 0, 60.0, 200.0), &[1, 0]);
        assert!(idx.within(&agents, 0, 300.0, 400.0).is_empty());
    }

    #[test]
    fn relocate_keeps_order() {
        let mut agents = vec![agent(0, 0, 100.0), agent(1, 1, 200.0), agent(2, 1, 50.0)];
        let mut idx = LaneIndex::build(&agents, 2);
        idx.relocate(&agents, 0, 0, 1);
        agents[0].state.lane = 1;
        assert_eq!(idx.lane(1), &[1, 0, 2]);
        assert!(idx.lane(0).is_empty());
    }

    #[test]
    fn road_views() {
        let agents = vec![agent(0, 0, 100.0), agent(1, 0, 130.0), agent(2, 1, 90.0)];
        let idx = LaneIndex::build(&agents, 2);
        let road = Road::new(&agents, &idx);
        let params = vec![DriverParams::human(); 3];
        let lv = road.leader_view(0).unwrap();
        assert!((lv.gap - 25.5).abs() < 1e-12);
        let nbrs = road.neighbor_set(0, &params);
        assert!(nbrs.left.is_none());
        let right = nbrs.right.unwrap();
        assert!(right.leader.is_none());
        assert!((right.follower.unwrap().gap - (95.5 - 90.0)).abs() < 1e-12);
        assert_eq!(road.by_id(VehicleId(2)).unwrap().lane, 1);
        let (l, g, _, _) = idx.tightest_gap(&agents).unwrap();
        assert_eq!(l, 0);
        assert!((g - 25.5).abs() < 1e-12);
    }
}
