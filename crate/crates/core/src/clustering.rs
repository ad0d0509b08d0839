//! CAV platoon lifecycle.
//!
//! Under local coordination free agents scan for nearby platoons (or other
//! free agents) and run a join maneuver through [`advance_join`]; platoons
//! additionally drift toward the preferential lane one member per step.
//! Under ad hoc coordination no maneuver is ever planned: a CAV that ends up
//! directly behind another CAV within coupling distance is simply coupled to
//! it ([`adhoc_couplings`]). Both strategies share the membership bookkeeping
//! ([`complete_join`], [`dissolve_or_split`], [`split_at`]).

use std::collections::{BTreeMap, BTreeSet};

use crate::lateral::{gap_acceptable, Side};
use crate::longitudinal::{eidm_accel, free_road_accel, LeaderView};
use crate::road::{Agent, Road};
use crate::types::{CaccParams, DriverParams, IdAllocator, JoinType, Platoon, PlatoonId, Role, VehicleClass, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum JoinTarget {
    Platoon(PlatoonId),
    FreeAgent(VehicleId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JoinState {
    Approaching,
    AwaitingGap,
    Merging,
    Completed,
    Aborted,
}

impl JoinState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JoinState::Completed | JoinState::Aborted)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinPlan {
    pub subject_id: VehicleId,
    pub target: JoinTarget,
    pub join_type: JoinType,
    pub target_lane: usize,
    /// Position of the subject in the member list once joined.
    pub insertion_index: usize,
    /// Members bracketing a mid-join gap (ahead, behind).
    pub mid_pair: Option<(VehicleId, VehicleId)>,
    pub state: JoinState,
    pub deadline: f64,
}

/// Read-only inputs of the clustering decisions of one step.
pub struct ClusterContext<'a> {
    pub road: &'a Road<'a>,
    pub platoons: &'a BTreeMap<PlatoonId, Platoon>,
    pub cacc: &'a CaccParams,
    pub now: f64,
    /// Subjects of active join plans.
    pub busy: &'a BTreeSet<VehicleId>,
    /// Free agents that are the target of an active plan.
    pub targeted: &'a BTreeSet<VehicleId>,
    pub drifting: &'a BTreeSet<PlatoonId>,
    /// Effective parameters (time gap resolved) of every agent.
    pub params: &'a [DriverParams],
}

/// Whether one more vehicle may join `platoon`.
pub fn admission_check(platoon: &Platoon, cacc: &CaccParams) -> bool {
    platoon.size() < cacc.max_platoon_size && !platoon.dissolving
}

/// A join target resolved against the current road.
struct Resolved {
    /// Agent indices, front to back.
    members: Vec<usize>,
    lane: usize,
    admissible: bool,
}

fn resolve(target: JoinTarget, ctx: &ClusterContext) -> Option<Resolved> {
    let road = ctx.road;
    match target {
        JoinTarget::FreeAgent(id) => {
            let i = road.index_of(id)?;
            let s = road.state(i);
            (s.class == VehicleClass::Cav && s.role == Role::FreeAgent && !ctx.busy.contains(&id))
                .then(|| Resolved { members: vec![i], lane: s.lane, admissible: ctx.cacc.max_platoon_size >= 2 })
        }
        JoinTarget::Platoon(pid) => {
            let p = ctx.platoons.get(&pid)?;
            if ctx.drifting.contains(&pid) {
                return None;
            }
            let members = p.member_ids.iter().map(|&m| road.index_of(m)).collect::<Option<Vec<_>>>()?;
            let lane = road.state(members[0]).lane;
            members
                .iter()
                .all(|&m| road.state(m).lane == lane)
                .then(|| Resolved { members, lane, admissible: admission_check(p, ctx.cacc) })
        }
    }
}

fn coupling_distance(speed: f64, p: &DriverParams, cacc: &CaccParams) -> f64 {
    p.min_gap + speed * cacc.leader_time_gap + cacc.coupling_margin
}

/// Looks for the best join opportunity of free agent `subject`.
///
/// Candidates within communication range in the own or an adjacent lane are
/// ranked same-lane first, then by longitudinal distance. Returns `None` when
/// nothing passes admission.
pub fn scan_opportunities(subject: usize, ctx: &ClusterContext) -> Option<JoinPlan> {
    let road = ctx.road;
    let s = road.state(subject);
    if s.class != VehicleClass::Cav || s.role != Role::FreeAgent {
        return None;
    }
    let range = ctx.cacc.comm_range;
    let lanes = s.lane.saturating_sub(1)..=(s.lane + 1).min(road.lane_count() - 1);

    let mut targets = BTreeSet::new();
    for lane in lanes {
        for &j in road.index.within(road.agents, lane, s.position - range, s.position + range) {
            let o = road.state(j);
            if j == subject || o.class != VehicleClass::Cav {
                continue;
            }
            match o.platoon_id {
                Some(pid) => targets.insert(JoinTarget::Platoon(pid)),
                None => targets.insert(JoinTarget::FreeAgent(o.id)),
            };
        }
    }

    let mut best: Option<((bool, f64), JoinPlan)> = None;
    for target in targets {
        let Some(r) = resolve(target, ctx) else { continue };
        if !r.admissible || r.lane.abs_diff(s.lane) > 1 {
            continue;
        }
        let head = road.state(r.members[0]);
        let tail = road.state(*r.members.last().unwrap());
        let same_lane = r.lane == s.lane;

        let (join_type, distance, insertion_index, mid_pair) = if s.position < tail.rear() {
            if same_lane && road.leader(subject) != Some(*r.members.last().unwrap()) {
                continue;
            }
            (JoinType::Rear, tail.rear() - s.position, r.members.len(), None)
        } else if s.rear() > head.position {
            if same_lane && road.follower(subject) != Some(r.members[0]) {
                continue;
            }
            // Only when already lined up: dropping back to wait for the
            // platoon would hold up the subject's own lane.
            let distance = s.rear() - head.position;
            if distance > coupling_distance(s.speed, &road.agents[subject].params, ctx.cacc) {
                continue;
            }
            (JoinType::Front, distance, 0, None)
        } else {
            if same_lane {
                continue;
            }
            let k = (1..r.members.len()).find(|&k| {
                road.state(r.members[k]).position < s.position && s.position < road.state(r.members[k - 1]).position
            });
            let Some(k) = k else { continue };
            let pair = (road.state(r.members[k - 1]).id, road.state(r.members[k]).id);
            (JoinType::Mid, 0.0, k, Some(pair))
        };
        if !ctx.cacc.join_enabled(join_type) || distance > range {
            continue;
        }
        let key = (!same_lane, distance);
        let better = match &best {
            None => true,
            Some((k, _)) => !key.0 & k.0 || (key.0 == k.0 && key.1 < k.1),
        };
        if better {
            let plan = JoinPlan {
                subject_id: s.id,
                target,
                join_type,
                target_lane: r.lane,
                insertion_index,
                mid_pair,
                state: JoinState::Approaching,
                deadline: ctx.now + ctx.cacc.join_deadline,
            };
            best = Some((key, plan));
        }
    }
    best.map(|(_, plan)| plan)
}

/// Outcome of one state-machine step of a join plan.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinAdvance {
    pub plan: JoinPlan,
    /// Upper bound on the subject's acceleration while it lines up.
    pub accel_cap: Option<f64>,
    /// Lane change to execute this step (state `Merging`).
    pub lane_change: Option<Side>,
}

fn with_state(plan: &JoinPlan, state: JoinState) -> JoinPlan {
    JoinPlan { state, ..plan.clone() }
}

fn aborted(plan: &JoinPlan) -> JoinAdvance {
    JoinAdvance { plan: with_state(plan, JoinState::Aborted), accel_cap: None, lane_change: None }
}

/// Advances a join plan by one step against the current road.
///
/// Approaching: the subject regulates its speed to line up with the
/// insertion point. AwaitingGap: lined up, waiting for an acceptable gap in
/// the target lane. Merging: the lane change is requested this step; the
/// caller completes the join once the change is executed. A plan whose target
/// vanished, filled up, or whose deadline passed is aborted.
pub fn advance_join(plan: &JoinPlan, ctx: &ClusterContext) -> JoinAdvance {
    if plan.state.is_terminal() {
        return JoinAdvance { plan: plan.clone(), accel_cap: None, lane_change: None };
    }
    let road = ctx.road;
    let cacc = ctx.cacc;
    let Some(si) = road.index_of(plan.subject_id) else { return aborted(plan) };
    if ctx.now >= plan.deadline {
        return aborted(plan);
    }
    let Some(r) = resolve(plan.target, ctx) else { return aborted(plan) };
    let s = road.state(si);
    if !r.admissible || r.lane.abs_diff(s.lane) > 1 {
        return aborted(plan);
    }
    let p = road.agents[si].params.with_time_gap(cacc.follower_time_gap);
    let margin = cacc.approach_speed_margin;
    let upper = coupling_distance(s.speed, &p, cacc);
    let same_lane = r.lane == s.lane;
    let side = Side::toward(s.lane, r.lane);

    let (accel_cap, aligned, neighbors_ok) = match plan.join_type {
        JoinType::Rear => {
            let tail_i = *r.members.last().unwrap();
            let tail = road.state(tail_i);
            let gap = tail.rear() - s.position;
            let cap = if gap > p.min_gap {
                let chase = p.with_desired_speed(p.desired_speed.min(tail.speed + margin).max(0.1));
                eidm_accel(s.speed, Some(&LeaderView::new(gap, tail.speed, tail.accel)), &chase).ok()
            } else {
                Some(free_road_accel(s.speed, &p.with_desired_speed((tail.speed - margin).max(1.0))))
            };
            let aligned = gap >= p.min_gap && gap <= upper;
            let ok = if same_lane {
                road.leader(si) == Some(tail_i)
            } else {
                let (leader, _) = road.index.around(road.agents, r.lane, s.position, Some(si));
                leader == Some(tail_i)
            };
            (cap, aligned, ok)
        }
        JoinType::Front => {
            let head_i = r.members[0];
            let head = road.state(head_i);
            let gap = s.rear() - head.position;
            let lower = p.min_gap;
            let target_speed = if gap < lower {
                head.speed + margin
            } else if gap > upper {
                head.speed - margin
            } else {
                head.speed
            };
            let cap = free_road_accel(s.speed, &p.with_desired_speed(target_speed.clamp(1.0, p.desired_speed)));
            let ok = if same_lane {
                road.follower(si) == Some(head_i)
            } else {
                let (_, follower) = road.index.around(road.agents, r.lane, s.position, Some(si));
                follower == Some(head_i)
            };
            (Some(cap), gap >= lower && gap <= upper, ok)
        }
        JoinType::Mid => {
            let Some((ahead_id, behind_id)) = plan.mid_pair else { return aborted(plan) };
            let (Some(ai), Some(bi)) = (road.index_of(ahead_id), road.index_of(behind_id)) else {
                return aborted(plan);
            };
            let k = r.members.iter().position(|&m| m == bi);
            if k.is_none() || k == Some(0) || r.members[k.unwrap() - 1] != ai {
                return aborted(plan);
            }
            let (a, b) = (road.state(ai), road.state(bi));
            let target_front = b.position + (a.rear() - b.position + s.length) / 2.0;
            let correction = ((target_front - s.position) / 5.0).clamp(-margin, margin);
            let cap = free_road_accel(s.speed, &p.with_desired_speed((a.speed + correction).clamp(1.0, p.desired_speed)));
            let aligned = a.rear() - s.position >= p.min_gap && s.rear() - b.position >= p.min_gap;
            let (leader, follower) = road.index.around(road.agents, r.lane, s.position, Some(si));
            (Some(cap), aligned, leader == Some(ai) && follower == Some(bi))
        }
    };

    if same_lane {
        let state = if aligned && neighbors_ok { JoinState::Completed } else { JoinState::Approaching };
        return JoinAdvance { plan: with_state(plan, state), accel_cap, lane_change: None };
    }
    if !aligned {
        return JoinAdvance { plan: with_state(plan, JoinState::Approaching), accel_cap, lane_change: None };
    }
    let target = road.neighbors_in_lane(si, r.lane, ctx.params);
    let follower = target.follower.map(|mut f| {
        if plan.join_type != JoinType::Rear {
            f.params = f.params.with_time_gap(cacc.follower_time_gap);
        }
        f
    });
    // A front joiner becomes the platoon leader and keeps the longer gap.
    let own = match plan.join_type {
        JoinType::Front => p.with_time_gap(cacc.leader_time_gap),
        _ => p,
    };
    let acceptable = neighbors_ok
        && s.lane_change_cooldown <= 0.0
        && gap_acceptable(s.speed, target.leader.as_ref(), follower.as_ref(), &own, own.safe_decel);
    if acceptable {
        JoinAdvance { plan: with_state(plan, JoinState::Merging), accel_cap, lane_change: side }
    } else {
        JoinAdvance { plan: with_state(plan, JoinState::AwaitingGap), accel_cap, lane_change: None }
    }
}

fn agent_mut(agents: &mut [Agent], id: VehicleId) -> Option<&mut Agent> {
    agents.binary_search_by_key(&id, |a| a.state.id).ok().map(move |i| &mut agents[i])
}

/// Writes roles and platoon ids of `platoon`'s members into their states.
pub fn assign_roles(platoon: &Platoon, agents: &mut [Agent]) {
    for (k, &m) in platoon.member_ids.iter().enumerate() {
        if let Some(a) = agent_mut(agents, m) {
            a.state.platoon_id = Some(platoon.id);
            a.state.role = if k == 0 { Role::Leader } else { Role::Follower };
        }
    }
}

/// Reverts CAVs to free agents.
pub fn release(ids: &[VehicleId], agents: &mut [Agent]) {
    for &id in ids {
        if let Some(a) = agent_mut(agents, id) {
            a.state.platoon_id = None;
            a.state.role = Role::FreeAgent;
        }
    }
}

/// Applies the membership update of a join whose maneuver finished.
/// Returns the platoon the subject now belongs to, or `None` when the join
/// would overflow the size cap.
pub fn complete_join(
    plan: &JoinPlan,
    agents: &mut [Agent],
    platoons: &mut BTreeMap<PlatoonId, Platoon>,
    ids: &mut IdAllocator,
    cacc: &CaccParams,
) -> Option<PlatoonId> {
    let subject = plan.subject_id;
    let me = &agent_mut(agents, subject)?.state;
    if me.platoon_id.is_some() {
        return None;
    }
    let lane = me.lane;
    let platoon = match plan.target {
        JoinTarget::FreeAgent(target) => {
            // The target may have coupled with someone else since the last check.
            if agent_mut(agents, target)?.state.platoon_id.is_some() {
                return None;
            }
            let members = match plan.join_type {
                JoinType::Front => vec![subject, target],
                _ => vec![target, subject],
            };
            Platoon::new(ids.allocate_platoon_id(), members, lane)
        }
        JoinTarget::Platoon(pid) => {
            let mut p = platoons.get(&pid)?.clone();
            if !admission_check(&p, cacc) {
                return None;
            }
            match plan.join_type {
                JoinType::Front => p.member_ids.insert(0, subject),
                JoinType::Rear => p.member_ids.push(subject),
                JoinType::Mid => {
                    let (_, behind) = plan.mid_pair?;
                    let k = p.index_of(behind)?;
                    p.member_ids.insert(k, subject);
                }
            }
            p.leader_id = p.member_ids[0];
            p.lane = lane;
            p
        }
    };
    if platoon.size() > cacc.max_platoon_size {
        return None;
    }
    assign_roles(&platoon, agents);
    let id = platoon.id;
    platoons.insert(id, platoon);
    Some(id)
}

/// Result of removing or cutting members of a platoon.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitOutcome {
    /// Surviving platoons (two or more members each).
    pub platoons: Vec<Platoon>,
    /// Remaining members that are now free agents.
    pub released: Vec<VehicleId>,
}

fn pieces(original: &Platoon, parts: Vec<Vec<VehicleId>>, ids: &mut IdAllocator) -> SplitOutcome {
    let mut out = SplitOutcome::default();
    let mut first = true;
    for part in parts.into_iter().filter(|p| !p.is_empty()) {
        if part.len() == 1 {
            out.released.push(part[0]);
            continue;
        }
        let id = if first { original.id } else { ids.allocate_platoon_id() };
        first = false;
        out.platoons.push(Platoon { dissolving: false, ..Platoon::new(id, part, original.lane) });
    }
    out
}

/// Removes `departing` from `platoon`.
///
/// A departing leader hands over to the next member; a departing middle
/// member splits the platoon in two; singletons revert to free agents. The
/// front-most surviving part keeps the original id.
pub fn dissolve_or_split(platoon: &Platoon, departing: VehicleId, ids: &mut IdAllocator) -> SplitOutcome {
    let Some(k) = platoon.index_of(departing) else {
        return SplitOutcome { platoons: vec![platoon.clone()], released: vec![] };
    };
    let front = platoon.member_ids[..k].to_vec();
    let back = platoon.member_ids[k + 1..].to_vec();
    pieces(platoon, vec![front, back], ids)
}

/// Cuts `platoon` in front of member index `k` without removing anyone.
pub fn split_at(platoon: &Platoon, k: usize, ids: &mut IdAllocator) -> SplitOutcome {
    let k = k.min(platoon.size());
    let front = platoon.member_ids[..k].to_vec();
    let back = platoon.member_ids[k..].to_vec();
    pieces(platoon, vec![front, back], ids)
}

/// Replaces platoon `old` with the pieces of `outcome` and updates roles.
pub fn apply_split(old: PlatoonId, outcome: &SplitOutcome, agents: &mut [Agent], platoons: &mut BTreeMap<PlatoonId, Platoon>) {
    platoons.remove(&old);
    release(&outcome.released, agents);
    for p in &outcome.platoons {
        assign_roles(p, agents);
        platoons.insert(p.id, p.clone());
    }
}

/// Lane-change side for a platoon that should move toward the preferential
/// lane, when every member can currently change safely.
pub fn preferential_lane_drift(platoon: &Platoon, ctx: &ClusterContext) -> Option<Side> {
    let road = ctx.road;
    let side = Side::toward(platoon.lane, ctx.cacc.preferential_lane)?;
    let target = side.target_lane(platoon.lane, road.lane_count())?;
    for &m in &platoon.member_ids {
        let i = road.index_of(m)?;
        let s = road.state(i);
        if s.lane != platoon.lane || s.lane_change_cooldown > 0.0 {
            return None;
        }
        let n = road.neighbors_in_lane(i, target, ctx.params);
        let p = &ctx.params[i];
        if !gap_acceptable(s.speed, n.leader.as_ref(), n.follower.as_ref(), p, p.safe_decel) {
            return None;
        }
    }
    Some(side)
}

/// Pending front-to-back lane change of a whole platoon.
#[derive(Debug, Clone, PartialEq)]
pub struct Drift {
    pub platoon_id: PlatoonId,
    pub side: Side,
    pub from_lane: usize,
    pub to_lane: usize,
    /// Next member (index in the member list) to move.
    pub next: usize,
}

/// Pairs `(front tail, back head)` of CAV units that drive directly behind
/// one another within coupling distance, front to back per lane.
pub fn adhoc_couplings(ctx: &ClusterContext) -> Vec<(VehicleId, VehicleId)> {
    let road = ctx.road;
    let mut out = Vec::new();
    for lane in 0..road.lane_count() {
        for &b in road.index.lane(lane) {
            let back = road.state(b);
            if back.class != VehicleClass::Cav
                || !matches!(back.role, Role::FreeAgent | Role::Leader)
                || ctx.busy.contains(&back.id)
                || back.platoon_id.is_some_and(|p| ctx.drifting.contains(&p))
            {
                continue;
            }
            let Some(f) = road.leader(b) else { continue };
            let front = road.state(f);
            if front.class != VehicleClass::Cav || ctx.busy.contains(&front.id) {
                continue;
            }
            let front_is_tail = match front.platoon_id {
                None => true,
                Some(pid) => {
                    !ctx.drifting.contains(&pid) && ctx.platoons.get(&pid).is_some_and(|p| p.tail() == front.id)
                }
            };
            if front_is_tail && back.gap_to(front) <= coupling_distance(back.speed, &ctx.params[b], ctx.cacc) {
                out.push((front.id, back.id));
            }
        }
    }
    out
}

fn unit_of(id: VehicleId, agents: &[Agent], platoons: &BTreeMap<PlatoonId, Platoon>) -> Option<Vec<VehicleId>> {
    let i = agents.binary_search_by_key(&id, |a| a.state.id).ok()?;
    match agents[i].state.platoon_id {
        None => Some(vec![id]),
        Some(pid) => platoons.get(&pid).map(|p| p.member_ids.clone()),
    }
}

/// Couples the unit headed by `back_head` behind the unit ending in
/// `front_tail`, re-checking the size cap against the current membership.
pub fn couple(
    front_tail: VehicleId,
    back_head: VehicleId,
    agents: &mut [Agent],
    platoons: &mut BTreeMap<PlatoonId, Platoon>,
    ids: &mut IdAllocator,
    cacc: &CaccParams,
) -> Option<PlatoonId> {
    let front = unit_of(front_tail, agents, platoons)?;
    let back = unit_of(back_head, agents, platoons)?;
    if front.last() != Some(&front_tail) || back.first() != Some(&back_head) || front.contains(&back_head) {
        return None;
    }
    if front.len() + back.len() > cacc.max_platoon_size {
        return None;
    }
    let front_pid = agent_mut(agents, front_tail)?.state.platoon_id;
    let back_pid = agent_mut(agents, back_head)?.state.platoon_id;
    if let Some(p) = front_pid.and_then(|p| platoons.get(&p)) {
        if p.dissolving {
            return None;
        }
    }
    let lane = agent_mut(agents, front_tail)?.state.lane;
    let id = front_pid.unwrap_or_else(|| ids.allocate_platoon_id());
    if let Some(bp) = back_pid {
        platoons.remove(&bp);
    }
    let members = front.into_iter().chain(back).collect();
    let platoon = Platoon::new(id, members, lane);
    assign_roles(&platoon, agents);
    platoons.insert(id, platoon);
    Some(id)
}

/// Member index at which each platoon has come apart (member left the lane
/// of its predecessor or fell back beyond twice the coupling distance).
pub fn cohesion_breaks(ctx: &ClusterContext) -> Vec<(PlatoonId, usize)> {
    let road = ctx.road;
    let mut out = Vec::new();
    for (pid, p) in ctx.platoons {
        if ctx.drifting.contains(pid) {
            continue;
        }
        for k in 1..p.size() {
            let (Some(a), Some(b)) = (road.index_of(p.member_ids[k - 1]), road.index_of(p.member_ids[k])) else {
                continue;
            };
            let (ahead, behind) = (road.state(a), road.state(b));
            let limit = 2.0 * coupling_distance(behind.speed, &ctx.params[b], ctx.cacc);
            if ahead.lane != behind.lane || behind.gap_to(ahead) > limit {
                out.push((*pid, k));
                break;
            }
        }
    }
    out
}
