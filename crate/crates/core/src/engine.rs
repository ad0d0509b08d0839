//! Discrete-time simulation loop.
//!
//! One step of length `dt` runs these phases, every decision phase reading
//! the same snapshot of the road:
//!
//! 1. cooldowns tick down, arrivals are generated and admitted;
//! 2. snapshot (per-lane ordering) and, on a log instant, trajectory samples;
//! 3. clustering: platoon cohesion, passive coupling and, under local
//!    coordination, join plans and preferential-lane drift;
//! 4. lane changes, applied in vehicle-id order and re-validated against the
//!    lanes as already modified in this phase;
//! 5. accelerations (IDM for humans, enhanced IDM for CAVs);
//! 6. ballistic integration;
//! 7. exits at the downstream boundary and the off-ramp;
//! 8. invariant checks (no overlap, platoon consistency, conservation).

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use crate::clustering::{
    adhoc_couplings, advance_join, apply_split, cohesion_breaks, complete_join, couple, dissolve_or_split,
    preferential_lane_drift, release, scan_opportunities, split_at, ClusterContext, Drift, JoinAdvance, JoinPlan,
    JoinState, JoinTarget,
};
use crate::demand::{network_min_headway, Arrival, Demand, DemandSpec};
use crate::error::{Error, Fault, FaultKind, Result};
use crate::lateral::{execute_lane_change, gap_acceptable, mobil_decision, FollowerView, LaneDecision, Side};
use crate::longitudinal::{desired_gap, effective_time_gap, eidm_accel, idm_accel, LeaderView};
use crate::road::{Agent, LaneIndex, Road, Route};
use crate::types::{
    DriverParams, Event, EventKind, IdAllocator, JoinType, Platoon, PlatoonId, Role, ScenarioConfig, Strategy,
    TrajectorySample, VehicleClass, VehicleId, VehicleState,
};

/// Vehicles farther ahead than this are not reported as leaders in the log.
pub const SENSING_RANGE_M: f64 = 250.0;

const EPS: f64 = 1e-9;

/// Sink for the records a run produces after warm-up.
pub trait Recorder {
    fn sample(&mut self, sample: &TrajectorySample);
    fn event(&mut self, event: &Event);
}

/// Keeps every record in memory.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub samples: Vec<TrajectorySample>,
    pub events: Vec<Event>,
}

impl Recorder for RunLog {
    fn sample(&mut self, sample: &TrajectorySample) {
        self.samples.push(sample.clone());
    }

    fn event(&mut self, event: &Event) {
        self.events.push(event.clone());
    }
}

/// Discards everything.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullRecorder;

impl Recorder for NullRecorder {
    fn sample(&mut self, _: &TrajectorySample) {}
    fn event(&mut self, _: &Event) {}
}

/// Counters of a run, including the warm-up period.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub steps: u64,
    /// Vehicles generated by the demand process (admitted or still queued).
    pub arrivals: u64,
    pub admitted: u64,
    pub exited: u64,
    pub offramp_exited: u64,
    pub present: u64,
    pub queued: u64,
    pub max_queued: u64,
    pub join_plans_created: u64,
    pub joins_completed: u64,
    pub joins_aborted: u64,
    pub couplings: u64,
    pub lane_changes: u64,
    pub max_platoon_size: usize,
    /// Smallest bumper-to-bumper clearance seen at the end of any step.
    pub min_gap_m: Option<f64>,
}

/// A lane change requested during the decision phases of one step.
#[derive(Debug, Clone, PartialEq)]
enum Request {
    Discretionary,
    Mandatory,
    Join {
        expect_leader: Option<VehicleId>,
        expect_follower: Option<VehicleId>,
        own: DriverParams,
        follower_time_gap: Option<f64>,
    },
    Drift(PlatoonId),
}

#[derive(Debug, Clone, PartialEq)]
struct Move {
    id: VehicleId,
    side: Side,
    request: Request,
}

/// Full simulation state.
#[derive(Debug, Clone)]
pub struct World {
    config: ScenarioConfig,
    step: u64,
    /// Sorted by id; new vehicles always get the largest id so far.
    agents: Vec<Agent>,
    index: LaneIndex,
    platoons: BTreeMap<PlatoonId, Platoon>,
    plans: BTreeMap<VehicleId, JoinPlan>,
    drifts: BTreeMap<PlatoonId, Drift>,
    /// Acceleration caps of join subjects for the current step.
    caps: BTreeMap<VehicleId, f64>,
    vehicle_ids: IdAllocator,
    platoon_ids: IdAllocator,
    mainline: Demand,
    on_ramp: Option<Demand>,
    queue: VecDeque<Arrival>,
    ramp_queue: VecDeque<Arrival>,
    summary: RunSummary,
}

/// Ballistic update over one step. A vehicle that would reverse stops at the
/// instant its speed reaches zero instead.
pub fn integrate(state: &mut VehicleState, accel: f64, dt: f64) {
    let v = state.speed;
    let v_next = v + accel * dt;
    if v_next > 0.0 {
        state.position += v * dt + 0.5 * accel * dt * dt;
        state.speed = v_next;
    } else {
        if accel < 0.0 {
            state.position += v * v / (2.0 * -accel);
        }
        state.speed = 0.0;
    }
    state.accel = accel;
}

fn demand_spec(config: &ScenarioConfig, demand_vph: f64, off_ramp_share: f64) -> DemandSpec {
    DemandSpec {
        demand_vph,
        min_headway_s: network_min_headway(&config.hv_params, config.entry_speed_mps, config.lane_count, demand_vph),
        mpr: config.mpr,
        hv_desired_speed: config.hv_params.desired_speed,
        cav_desired_speed: config.cav_params.desired_speed,
        desired_speed_spread: config.desired_speed_spread,
        off_ramp_share,
    }
}

/// Runs a whole scenario, streaming post-warm-up records into `recorder`.
pub fn run_scenario(config: &ScenarioConfig, recorder: &mut dyn Recorder) -> Result<RunSummary> {
    World::new(config.clone())?.run(recorder)
}

impl World {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let share = config.ramps.as_ref().map_or(0.0, |r| r.off_ramp_share);
        let mainline = Demand::new(demand_spec(&config, config.demand_vph, share), config.seed, 0);
        let on_ramp = config.ramps.as_ref().map(|r| {
            let spec = DemandSpec {
                min_headway_s: network_min_headway(&config.hv_params, config.entry_speed_mps, 1, r.on_ramp_demand_vph),
                ..demand_spec(&config, r.on_ramp_demand_vph, 0.0)
            };
            Demand::new(spec, config.seed, 1)
        });
        Ok(Self {
            index: LaneIndex::build(&[], config.lane_count),
            config,
            step: 0,
            agents: Vec::new(),
            platoons: BTreeMap::new(),
            plans: BTreeMap::new(),
            drifts: BTreeMap::new(),
            caps: BTreeMap::new(),
            vehicle_ids: IdAllocator::new(),
            platoon_ids: IdAllocator::new(),
            mainline,
            on_ramp,
            queue: VecDeque::new(),
            ramp_queue: VecDeque::new(),
            summary: RunSummary::default(),
        })
    }

    /// A world that starts with the given vehicles on the road (free agents,
    /// no platoons). Ids must be unique; they are kept.
    pub fn with_agents(config: ScenarioConfig, mut agents: Vec<Agent>) -> Result<Self> {
        let mut world = Self::new(config)?;
        agents.sort_by_key(|a| a.state.id);
        for w in agents.windows(2) {
            if w[0].state.id == w[1].state.id {
                return Err(Error::InvalidConfig(format!("duplicate vehicle id {}", w[0].state.id)));
            }
        }
        for a in &agents {
            if a.state.lane >= world.config.lane_count {
                return Err(Error::NoSuchLane { lane: a.state.lane as i64, lane_count: world.config.lane_count });
            }
        }
        if let Some(last) = agents.last() {
            while world.vehicle_ids.issued() <= last.state.id.0 {
                world.vehicle_ids.allocate();
            }
        }
        world.summary.arrivals = agents.len() as u64;
        world.summary.admitted = agents.len() as u64;
        world.agents = agents;
        world.index = LaneIndex::build(&world.agents, world.config.lane_count);
        Ok(world)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    /// Simulated time of the current state, rounded to the nanosecond so
    /// that log instants print as plain decimals.
    pub fn time(&self) -> f64 {
        (self.step as f64 * self.config.dt_s * 1e9).round() / 1e9
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn platoons(&self) -> &BTreeMap<PlatoonId, Platoon> {
        &self.platoons
    }

    pub fn plans(&self) -> &BTreeMap<VehicleId, JoinPlan> {
        &self.plans
    }

    pub fn summary(&self) -> &RunSummary {
        &self.summary
    }

    pub fn queued(&self) -> usize {
        self.queue.len() + self.ramp_queue.len()
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.total_steps()
    }

    /// Steps until the configured duration is reached.
    pub fn run(mut self, recorder: &mut dyn Recorder) -> Result<RunSummary> {
        log::debug!(
            "run start: strategy {:?}, mpr {}, demand {} vph, seed {}",
            self.config.strategy,
            self.config.mpr,
            self.config.demand_vph,
            self.config.seed
        );
        while !self.is_finished() {
            if let Err(e) = self.step(recorder) {
                log::error!("{e}");
                return Err(e);
            }
            if self.step.is_multiple_of(6000) {
                log::trace!("t = {:.0} s: {} on road, {} queued", self.time(), self.agents.len(), self.queued());
            }
        }
        log::debug!("run done: {:?}", self.summary);
        Ok(self.summary)
    }

    fn recording(&self, time: f64) -> bool {
        time >= self.config.warmup_s - EPS
    }

    fn emit(&self, recorder: &mut dyn Recorder, event: Event) {
        if self.recording(event.time) {
            recorder.event(&event);
        }
    }

    fn fault(&self, kind: FaultKind, vehicles: Vec<VehicleId>) -> Error {
        Error::Fault(Fault { step: self.step, time_s: self.time(), kind, vehicles })
    }

    fn idx(&self, id: VehicleId) -> Option<usize> {
        self.agents.binary_search_by_key(&id, |a| a.state.id).ok()
    }

    /// Advances the world by one step.
    pub fn step(&mut self, recorder: &mut dyn Recorder) -> Result<()> {
        let now = self.time();
        let dt = self.config.dt_s;
        for a in &mut self.agents {
            let c = a.state.lane_change_cooldown - dt;
            a.state.lane_change_cooldown = if c > EPS { c } else { 0.0 };
        }
        self.admit(now, recorder);

        let index = LaneIndex::build(&self.agents, self.config.lane_count);
        if self.step.is_multiple_of(self.config.steps_per_log()) && self.recording(now) && now < self.config.duration_s - EPS {
            self.log_samples(&index, now, recorder);
        }

        self.caps.clear();
        let mut moves = Vec::new();
        if self.config.strategy != Strategy::Base {
            self.cluster(&index, now, recorder, &mut moves);
        }
        self.lateral(index, now, recorder, moves)?;

        let index = LaneIndex::build(&self.agents, self.config.lane_count);
        let params = self.effective_params(&index);
        let mut accels = Vec::with_capacity(self.agents.len());
        for (i, a) in self.agents.iter().enumerate() {
            let s = &a.state;
            let leader = index.leader(i).map(|l| {
                let ls = &self.agents[l].state;
                LeaderView::new(s.gap_to(ls), ls.speed, ls.accel)
            });
            let law = match s.class {
                VehicleClass::Hv => idm_accel,
                VehicleClass::Cav => eidm_accel,
            };
            let mut accel = law(s.speed, leader.as_ref(), &params[i]).map_err(|_| {
                let gap = leader.map_or(0.0, |l| l.gap);
                let other = index.leader(i).map(|l| self.agents[l].state.id);
                self.fault(FaultKind::Overlap { lane: s.lane, gap }, [Some(s.id), other].into_iter().flatten().collect())
            })?;
            if let Some(&cap) = self.caps.get(&s.id) {
                accel = accel.min(cap);
            }
            accels.push(accel);
        }
        for (a, accel) in self.agents.iter_mut().zip(accels) {
            integrate(&mut a.state, accel, dt);
        }

        self.step += 1;
        self.exits(recorder);
        self.index = LaneIndex::build(&self.agents, self.config.lane_count);
        self.check_invariants()
    }

    /// Per-agent parameters with the time gap each vehicle currently aims for.
    fn effective_params(&self, index: &LaneIndex) -> Vec<DriverParams> {
        let cacc = &self.config.cacc;
        self.agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                if a.state.class == VehicleClass::Hv {
                    return a.params;
                }
                let behind_predecessor = a
                    .state
                    .platoon_id
                    .and_then(|pid| self.platoons.get(&pid))
                    .and_then(|p| p.predecessor_of(a.state.id))
                    .is_some_and(|pred| index.leader(i).map(|l| self.agents[l].state.id) == Some(pred));
                let tg = effective_time_gap(&a.state, behind_predecessor, cacc, &self.config.hv_params);
                a.params.with_time_gap(tg)
            })
            .collect()
    }

    fn log_samples(&self, index: &LaneIndex, now: f64, recorder: &mut dyn Recorder) {
        for (i, a) in self.agents.iter().enumerate() {
            let s = &a.state;
            let leader = index
                .leader(i)
                .map(|l| &self.agents[l].state)
                .filter(|l| s.gap_to(l) <= SENSING_RANGE_M);
            recorder.sample(&TrajectorySample {
                time: now,
                vehicle_id: s.id,
                class: s.class,
                lane: s.lane,
                position: s.position,
                speed: s.speed,
                accel: s.accel,
                platoon_id: s.platoon_id,
                role: s.role,
                leader_id: leader.map(|l| l.id),
                leader_class: leader.map(|l| l.class),
            });
        }
    }

    fn personal_params(&self, arrival: &Arrival) -> DriverParams {
        let base = match arrival.class {
            VehicleClass::Hv => self.config.hv_params,
            VehicleClass::Cav => self.config.cav_params,
        };
        base.with_desired_speed(arrival.desired_speed)
    }

    /// Whether a CAV entering behind `tail` would be coupled to it at once.
    fn couples_at_entry(&self, tail: usize) -> bool {
        let t = &self.agents[tail].state;
        if self.config.strategy == Strategy::Base || t.class != VehicleClass::Cav || self.plans.contains_key(&t.id) {
            return false;
        }
        match t.platoon_id {
            None => self.config.cacc.max_platoon_size >= 2,
            Some(pid) => self.platoons.get(&pid).is_some_and(|p| {
                p.tail() == t.id && !self.drifts.contains_key(&pid) && !p.dissolving && p.size() < self.config.cacc.max_platoon_size
            }),
        }
    }

    /// Entry speed and distance already covered past the boundary for a
    /// vehicle entering behind `leader`, if it fits: at the nominal entry
    /// speed, otherwise at the leader's speed. A vehicle that became
    /// admissible during the last step has covered up to `elapsed` seconds of
    /// travel, but never closes in below its desired gap.
    fn entry_speed(&self, leader: Option<&LeaderView>, p: &DriverParams, elapsed: f64) -> Option<(f64, f64)> {
        let nominal = self.config.entry_speed_mps.min(p.desired_speed);
        let Some(l) = leader else { return Some((nominal, nominal * elapsed)) };
        let fits = |v: f64| {
            let spare = l.gap - desired_gap(v, v, p);
            if spare < 0.0 {
                return None;
            }
            let advance = spare.min(v * elapsed);
            let at_entry = LeaderView::new(l.gap - advance, l.speed, l.accel);
            idm_accel(v, Some(&at_entry), p).is_ok_and(|a| a >= -p.safe_decel).then_some((v, advance))
        };
        fits(nominal).or_else(|| fits(nominal.min(l.speed)))
    }

    fn place(&mut self, arrival: &Arrival, lane: usize, position: f64, speed: f64, now: f64, recorder: &mut dyn Recorder) {
        let id = self.vehicle_ids.allocate_vehicle_id();
        let state = VehicleState::new(id, arrival.class, lane, position, speed, self.config.vehicle_length_m);
        let mut agent = Agent::new(state, self.personal_params(arrival));
        agent.route = arrival.route;
        self.agents.push(agent);
        self.summary.admitted += 1;
        let event = Event {
            time: now,
            vehicle_id: id,
            class: arrival.class,
            kind: EventKind::Spawn,
            from_lane: lane,
            to_lane: lane,
            platoon_id: None,
        };
        self.emit(recorder, event);
    }

    fn admit(&mut self, now: f64, recorder: &mut dyn Recorder) {
        let new = self.mainline.arrivals_until(now + EPS);
        self.summary.arrivals += new.len() as u64;
        self.queue.extend(new);
        if let Some(ramp) = self.on_ramp.as_mut() {
            let new = ramp.arrivals_until(now + EPS);
            self.summary.arrivals += new.len() as u64;
            self.ramp_queue.extend(new);
        }

        let lanes = self.config.lane_count;
        let mut used = vec![false; lanes];
        while let Some(arrival) = self.queue.front().cloned() {
            let mut p = self.personal_params(&arrival);
            let mut options = Vec::new();
            for lane in (0..lanes).filter(|&l| !used[l]) {
                let tail = self.index.lane(lane).last().copied();
                let leader = tail.map(|t| {
                    let ts = &self.agents[t].state;
                    LeaderView::new(ts.rear(), ts.speed, ts.accel)
                });
                if arrival.class == VehicleClass::Cav {
                    let tg = match tail {
                        Some(t) if self.couples_at_entry(t) => self.config.cacc.follower_time_gap,
                        _ => self.config.cacc.leader_time_gap,
                    };
                    p = p.with_time_gap(tg);
                }
                if leader.is_some_and(|l| l.gap < p.min_gap) {
                    continue;
                }
                let elapsed = (now - arrival.time).clamp(0.0, self.config.dt_s);
                if let Some((v, advance)) = self.entry_speed(leader.as_ref(), &p, elapsed) {
                    options.push((lane, v, advance));
                }
            }
            if options.is_empty() {
                break;
            }
            let k = ((arrival.lane_draw * options.len() as f64) as usize).min(options.len() - 1);
            let (lane, speed, advance) = options[k];
            used[lane] = true;
            self.queue.pop_front();
            self.place(&arrival, lane, advance, speed, now, recorder);
        }

        if let Some(ramps) = self.config.ramps.clone() {
            let lane = lanes - 1;
            let x = ramps.on_ramp_position_m;
            if let Some(arrival) = self.ramp_queue.front().cloned() {
                let p = self.personal_params(&arrival);
                let p = match arrival.class {
                    VehicleClass::Hv => p,
                    VehicleClass::Cav => p.with_time_gap(self.config.cacc.leader_time_gap),
                };
                let (leader, follower) = self.index.around(&self.agents, lane, x, None);
                let lv = leader.map(|l| {
                    let ls = &self.agents[l].state;
                    LeaderView::new(ls.rear() - x, ls.speed, ls.accel)
                });
                let blocked_by_new = self.agents[self.index_len()..].iter().any(|a| a.state.lane == lane && a.state.position > x - 50.0);
                let fits = self.entry_speed(lv.as_ref(), &p, 0.0).map(|(v, _)| v).filter(|&v| {
                    let fv = follower.map(|f| {
                        let fs = &self.agents[f].state;
                        FollowerView {
                            gap: x - self.config.vehicle_length_m - fs.position,
                            speed: fs.speed,
                            accel: fs.accel,
                            params: self.agents[f].params,
                        }
                    });
                    lv.is_none_or(|l| l.gap >= p.min_gap) && gap_acceptable(v, None, fv.as_ref(), &p, p.safe_decel)
                });
                if let (Some(v), false) = (fits, blocked_by_new) {
                    self.ramp_queue.pop_front();
                    self.place(&arrival, lane, x, v, now, recorder);
                }
            }
        }
        self.summary.max_queued = self.summary.max_queued.max(self.queued() as u64);
    }

    /// Number of agents covered by the index built at the end of the last step.
    fn index_len(&self) -> usize {
        (0..self.config.lane_count).map(|l| self.index.lane(l).len()).sum()
    }

    fn cluster(&mut self, index: &LaneIndex, now: f64, recorder: &mut dyn Recorder, moves: &mut Vec<Move>) {
        let local = self.config.strategy == Strategy::Local;
        let cacc = self.config.cacc.clone();

        for p in self.platoons.values_mut() {
            if let Ok(i) = self.agents.binary_search_by_key(&p.leader_id, |a| a.state.id) {
                p.lane = self.agents[i].state.lane;
            }
        }

        // Cohesion and coupling change membership only, never positions, so
        // the snapshot ordering stays valid for everything below.
        let (breaks, couplings) = {
            let params = self.effective_params(index);
            let road = Road::new(&self.agents, index);
            let busy: BTreeSet<VehicleId> = self.plans.keys().copied().collect();
            let targeted = BTreeSet::new();
            let drifting: BTreeSet<PlatoonId> = self.drifts.keys().copied().collect();
            let ctx = ClusterContext {
                road: &road,
                platoons: &self.platoons,
                cacc: &cacc,
                now,
                busy: &busy,
                targeted: &targeted,
                drifting: &drifting,
                params: &params,
            };
            (cohesion_breaks(&ctx), adhoc_couplings(&ctx))
        };
        for (pid, k) in breaks {
            if let Some(p) = self.platoons.get(&pid).cloned() {
                let out = split_at(&p, k, &mut self.platoon_ids);
                apply_split(pid, &out, &mut self.agents, &mut self.platoons);
            }
        }
        for (front, back) in couplings {
            let back_pid = self.idx(back).and_then(|i| self.agents[i].state.platoon_id);
            if couple(front, back, &mut self.agents, &mut self.platoons, &mut self.platoon_ids, &cacc).is_some() {
                self.summary.couplings += 1;
                if let Some(bp) = back_pid {
                    self.drifts.remove(&bp);
                }
            }
        }
        if !local {
            return;
        }

        let params = self.effective_params(index);
        let (advances, new_plans, new_drifts) = {
            let road = Road::new(&self.agents, index);
            let busy: BTreeSet<VehicleId> = self.plans.keys().copied().collect();
            let mut targeted: BTreeSet<VehicleId> = self
                .plans
                .values()
                .filter_map(|p| match p.target {
                    JoinTarget::FreeAgent(t) => Some(t),
                    JoinTarget::Platoon(_) => None,
                })
                .collect();
            let drifting: BTreeSet<PlatoonId> = self.drifts.keys().copied().collect();
            let ctx = ClusterContext {
                road: &road,
                platoons: &self.platoons,
                cacc: &cacc,
                now,
                busy: &busy,
                targeted: &targeted.clone(),
                drifting: &drifting,
                params: &params,
            };
            let advances: Vec<JoinAdvance> = self.plans.values().map(|p| advance_join(p, &ctx)).collect();

            let mut subjects = busy.clone();
            let mut new_plans = Vec::new();
            for (i, a) in self.agents.iter().enumerate() {
                let s = &a.state;
                if s.class != VehicleClass::Cav
                    || s.role != Role::FreeAgent
                    || now < a.join_backoff_until
                    || subjects.contains(&s.id)
                    || targeted.contains(&s.id)
                {
                    continue;
                }
                let Some(plan) = scan_opportunities(i, &ctx) else { continue };
                if let JoinTarget::FreeAgent(t) = plan.target {
                    if subjects.contains(&t) {
                        continue;
                    }
                    targeted.insert(t);
                }
                subjects.insert(s.id);
                new_plans.push(plan);
            }

            let planned_targets: BTreeSet<PlatoonId> = self
                .plans
                .values()
                .chain(&new_plans)
                .filter_map(|p| match p.target {
                    JoinTarget::Platoon(pid) => Some(pid),
                    JoinTarget::FreeAgent(_) => None,
                })
                .collect();
            let new_drifts: Vec<(PlatoonId, Side)> = self
                .platoons
                .values()
                .filter(|p| !drifting.contains(&p.id) && !planned_targets.contains(&p.id))
                .filter_map(|p| preferential_lane_drift(p, &ctx).map(|side| (p.id, side)))
                .collect();
            (advances, new_plans, new_drifts)
        };

        for adv in advances {
            let id = adv.plan.subject_id;
            match adv.plan.state {
                JoinState::Aborted => self.abort_plan(id, now, recorder),
                JoinState::Completed => {
                    self.plans.insert(id, adv.plan.clone());
                    self.finish_plan(id, now, recorder);
                }
                JoinState::Merging => {
                    if let Some(cap) = adv.accel_cap {
                        self.caps.insert(id, cap);
                    }
                    if let Some(m) = adv.lane_change.and_then(|side| self.merge_move(&adv.plan, side)) {
                        moves.push(m);
                    }
                    self.plans.insert(id, adv.plan);
                }
                JoinState::Approaching | JoinState::AwaitingGap => {
                    if let Some(cap) = adv.accel_cap {
                        self.caps.insert(id, cap);
                    }
                    self.plans.insert(id, adv.plan);
                }
            }
        }
        for plan in new_plans {
            let still_free = self.idx(plan.subject_id).is_some_and(|i| self.agents[i].state.role == Role::FreeAgent);
            if still_free {
                self.summary.join_plans_created += 1;
                self.plans.insert(plan.subject_id, plan);
            }
        }
        for (pid, side) in new_drifts {
            if let Some(p) = self.platoons.get(&pid) {
                let to_lane = side.target_lane(p.lane, self.config.lane_count).expect("drift side checked");
                self.drifts.insert(pid, Drift { platoon_id: pid, side, from_lane: p.lane, to_lane, next: 0 });
            }
        }
        let drifts: Vec<Drift> = self.drifts.values().cloned().collect();
        for d in drifts {
            match self.platoons.get(&d.platoon_id).and_then(|p| p.member_ids.get(d.next)) {
                Some(&member) => moves.push(Move { id: member, side: d.side, request: Request::Drift(d.platoon_id) }),
                None => {
                    self.drifts.remove(&d.platoon_id);
                }
            }
        }
    }

    fn merge_move(&self, plan: &JoinPlan, side: Side) -> Option<Move> {
        let cacc = &self.config.cacc;
        let subject = &self.agents[self.idx(plan.subject_id)?];
        let members = match plan.target {
            JoinTarget::FreeAgent(t) => vec![t],
            JoinTarget::Platoon(pid) => self.platoons.get(&pid)?.member_ids.clone(),
        };
        let (expect_leader, expect_follower, own_gap, follower_time_gap) = match plan.join_type {
            JoinType::Rear => (members.last().copied(), None, cacc.follower_time_gap, None),
            JoinType::Front => (None, members.first().copied(), cacc.leader_time_gap, Some(cacc.follower_time_gap)),
            JoinType::Mid => {
                let (a, b) = plan.mid_pair?;
                (Some(a), Some(b), cacc.follower_time_gap, Some(cacc.follower_time_gap))
            }
        };
        Some(Move {
            id: plan.subject_id,
            side,
            request: Request::Join {
                expect_leader,
                expect_follower,
                own: subject.params.with_time_gap(own_gap),
                follower_time_gap,
            },
        })
    }

    fn abort_plan(&mut self, id: VehicleId, now: f64, recorder: &mut dyn Recorder) {
        self.plans.remove(&id);
        self.summary.joins_aborted += 1;
        let backoff = self.config.cacc.join_retry_backoff;
        if let Some(i) = self.idx(id) {
            let a = &mut self.agents[i];
            a.join_backoff_until = now + backoff;
            let event = Event {
                time: now,
                vehicle_id: id,
                class: a.state.class,
                kind: EventKind::JoinAborted,
                from_lane: a.state.lane,
                to_lane: a.state.lane,
                platoon_id: a.state.platoon_id,
            };
            self.emit(recorder, event);
        }
    }

    fn finish_plan(&mut self, id: VehicleId, now: f64, recorder: &mut dyn Recorder) {
        let Some(plan) = self.plans.get(&id).cloned() else { return };
        let cacc = self.config.cacc.clone();
        if let JoinTarget::Platoon(pid) = plan.target {
            self.drifts.remove(&pid);
        }
        match complete_join(&plan, &mut self.agents, &mut self.platoons, &mut self.platoon_ids, &cacc) {
            None => self.abort_plan(id, now, recorder),
            Some(pid) => {
                self.plans.remove(&id);
                self.summary.joins_completed += 1;
                if let Some(i) = self.idx(id) {
                    let s = &self.agents[i].state;
                    let event = Event {
                        time: now,
                        vehicle_id: id,
                        class: s.class,
                        kind: EventKind::JoinCompleted,
                        from_lane: s.lane,
                        to_lane: s.lane,
                        platoon_id: Some(pid),
                    };
                    self.emit(recorder, event);
                }
            }
        }
    }

    /// Removes `id` from its platoon (if any) and makes it a free agent.
    fn leave_platoon(&mut self, id: VehicleId) {
        let Some(i) = self.idx(id) else { return };
        let Some(pid) = self.agents[i].state.platoon_id else { return };
        if let Some(p) = self.platoons.get(&pid).cloned() {
            let out = dissolve_or_split(&p, id, &mut self.platoon_ids);
            apply_split(pid, &out, &mut self.agents, &mut self.platoons);
        }
        self.drifts.remove(&pid);
        release(&[id], &mut self.agents);
    }

    fn in_offramp_approach(&self, a: &Agent) -> bool {
        match (&self.config.ramps, a.route) {
            (Some(r), Route::OffRamp) => {
                let x = a.state.position;
                x >= r.off_ramp_position_m - r.off_ramp_approach_m && x < r.off_ramp_position_m
            }
            _ => false,
        }
    }

    fn lateral(&mut self, mut index: LaneIndex, now: f64, recorder: &mut dyn Recorder, mut moves: Vec<Move>) -> Result<()> {
        let lanes = self.config.lane_count;
        let params = self.effective_params(&index);
        {
            let road = Road::new(&self.agents, &index);
            let claimed: BTreeSet<VehicleId> = moves.iter().map(|m| m.id).collect();
            for (i, a) in self.agents.iter().enumerate() {
                let s = &a.state;
                if claimed.contains(&s.id) || s.lane_change_cooldown > 0.0 {
                    continue;
                }
                if self.in_offramp_approach(a) {
                    if s.lane + 1 < lanes {
                        moves.push(Move { id: s.id, side: Side::Right, request: Request::Mandatory });
                    }
                    continue;
                }
                let eligible = match s.class {
                    VehicleClass::Hv => true,
                    VehicleClass::Cav => s.role == Role::FreeAgent && !self.plans.contains_key(&s.id),
                };
                if !eligible {
                    continue;
                }
                let side = match mobil_decision(s, &road.neighbor_set(i, &params), &params[i]) {
                    LaneDecision::Stay => continue,
                    LaneDecision::Left => Side::Left,
                    LaneDecision::Right => Side::Right,
                };
                moves.push(Move { id: s.id, side, request: Request::Discretionary });
            }
        }
        moves.sort_by_key(|m| m.id);

        for m in moves {
            let Some(i) = self.idx(m.id) else { continue };
            let s = self.agents[i].state.clone();
            let Some(to) = m.side.target_lane(s.lane, lanes) else { continue };
            let (leader, follower) = index.around(&self.agents, to, s.position, Some(i));
            let identity_ok = match &m.request {
                Request::Join { expect_leader, expect_follower, .. } => {
                    let id_of = |j: Option<usize>| j.map(|j| self.agents[j].state.id);
                    expect_leader.is_none_or(|e| id_of(leader) == Some(e))
                        && expect_follower.is_none_or(|e| id_of(follower) == Some(e))
                }
                _ => true,
            };
            let own = match &m.request {
                Request::Join { own, .. } => *own,
                _ => params[i],
            };
            let lv = leader.map(|l| {
                let ls = &self.agents[l].state;
                LeaderView::new(s.gap_to(ls), ls.speed, ls.accel)
            });
            let fv = follower.map(|f| {
                let fs = &self.agents[f].state;
                let mut fp = params[f];
                if let Request::Join { follower_time_gap: Some(tg), .. } = &m.request {
                    fp = fp.with_time_gap(*tg);
                }
                FollowerView { gap: fs.gap_to(&s), speed: fs.speed, accel: fs.accel, params: fp }
            });
            let safe = s.lane_change_cooldown <= 0.0
                && identity_ok
                && gap_acceptable(s.speed, lv.as_ref(), fv.as_ref(), &own, own.safe_decel);

            if !safe {
                match m.request {
                    Request::Join { .. } => {
                        if let Some(plan) = self.plans.get_mut(&m.id) {
                            plan.state = JoinState::AwaitingGap;
                        }
                    }
                    Request::Drift(pid) => self.fail_drift(pid),
                    Request::Discretionary | Request::Mandatory => {}
                }
                continue;
            }

            if m.request == Request::Mandatory {
                self.leave_platoon(m.id);
            }
            let mandatory = m.request == Request::Mandatory;
            let (moved, mut event) =
                execute_lane_change(&self.agents[i].state, m.side, lanes, self.config.lane_change_cooldown_s, now, mandatory)?;
            index.relocate(&self.agents, i, s.lane, to);
            self.agents[i].state = moved;
            self.summary.lane_changes += 1;
            event.platoon_id = self.agents[i].state.platoon_id;
            self.emit(recorder, event);

            match m.request {
                Request::Join { .. } => self.finish_plan(m.id, now, recorder),
                Request::Drift(pid) => {
                    if let Some(d) = self.drifts.get_mut(&pid) {
                        d.next += 1;
                        let size = self.platoons.get(&pid).map_or(0, Platoon::size);
                        if d.next >= size {
                            let to_lane = d.to_lane;
                            self.drifts.remove(&pid);
                            if let Some(p) = self.platoons.get_mut(&pid) {
                                p.lane = to_lane;
                            }
                        }
                    }
                }
                Request::Discretionary | Request::Mandatory => {}
            }
        }
        Ok(())
    }

    /// A drifting platoon whose next member cannot change lanes is cut in
    /// front of that member; the part already moved keeps the platoon id.
    fn fail_drift(&mut self, pid: PlatoonId) {
        let Some(d) = self.drifts.remove(&pid) else { return };
        if d.next == 0 {
            return;
        }
        if let Some(p) = self.platoons.get(&pid).cloned() {
            let out = split_at(&p, d.next, &mut self.platoon_ids);
            apply_split(pid, &out, &mut self.agents, &mut self.platoons);
            if let Some(front) = self.platoons.get_mut(&pid) {
                front.lane = d.to_lane;
            }
        }
    }

    fn exits(&mut self, recorder: &mut dyn Recorder) {
        let now = self.time();
        let length = self.config.length_m;
        let lanes = self.config.lane_count;
        let off_ramp = self.config.ramps.as_ref().map(|r| r.off_ramp_position_m);
        let leaving: Vec<(VehicleId, EventKind)> = self
            .agents
            .iter()
            .filter_map(|a| {
                let s = &a.state;
                if a.route == Route::OffRamp && s.lane + 1 == lanes && off_ramp.is_some_and(|x| s.position >= x) {
                    Some((s.id, EventKind::OffRampExit))
                } else if s.position >= length {
                    Some((s.id, EventKind::Exit))
                } else {
                    None
                }
            })
            .collect();
        if leaving.is_empty() {
            return;
        }
        for &(id, kind) in &leaving {
            self.leave_platoon(id);
            if self.plans.remove(&id).is_some() {
                self.summary.joins_aborted += 1;
            }
            let s = &self.agents[self.idx(id).expect("leaving vehicle present")].state;
            let event = Event {
                time: now,
                vehicle_id: id,
                class: s.class,
                kind,
                from_lane: s.lane,
                to_lane: s.lane,
                platoon_id: None,
            };
            self.emit(recorder, event);
            match kind {
                EventKind::OffRampExit => self.summary.offramp_exited += 1,
                _ => self.summary.exited += 1,
            }
        }
        let gone: BTreeSet<VehicleId> = leaving.iter().map(|(id, _)| *id).collect();
        self.agents.retain(|a| !gone.contains(&a.state.id));
    }

    fn check_invariants(&mut self) -> Result<()> {
        if let Some((lane, gap, ahead, behind)) = self.index.tightest_gap(&self.agents) {
            self.summary.min_gap_m = Some(self.summary.min_gap_m.map_or(gap, |g| g.min(gap)));
            if gap <= 0.0 {
                let ids = vec![self.agents[ahead].state.id, self.agents[behind].state.id];
                return Err(self.fault(FaultKind::Overlap { lane, gap }, ids));
            }
        }

        let max = self.config.cacc.max_platoon_size;
        for (pid, p) in &self.platoons {
            self.summary.max_platoon_size = self.summary.max_platoon_size.max(p.size());
            if p.size() > max {
                return Err(self.fault(FaultKind::PlatoonSize { size: p.size(), max }, p.member_ids.clone()));
            }
            if p.size() < 2 || p.member_ids[0] != p.leader_id {
                return Err(self.fault(FaultKind::Membership(format!("platoon {pid} malformed")), p.member_ids.clone()));
            }
            for (k, &m) in p.member_ids.iter().enumerate() {
                let role = if k == 0 { Role::Leader } else { Role::Follower };
                let seen = self.idx(m).map(|i| (self.agents[i].state.platoon_id, self.agents[i].state.role));
                if seen != Some((Some(*pid), role)) {
                    let msg = format!("member {m} of platoon {pid} disagrees: expected {role}, found {seen:?}");
                    return Err(self.fault(FaultKind::Membership(msg), vec![m]));
                }
            }
        }
        let mut platooned = 0;
        for a in &self.agents {
            let s = &a.state;
            if !s.role_consistent() {
                return Err(self.fault(FaultKind::Membership(format!("vehicle {} role {}", s.id, s.role)), vec![s.id]));
            }
            if let Some(pid) = s.platoon_id {
                platooned += 1;
                if self.platoons.get(&pid).and_then(|p| p.index_of(s.id)).is_none() {
                    let msg = format!("vehicle {} claims platoon {pid}", s.id);
                    return Err(self.fault(FaultKind::Membership(msg), vec![s.id]));
                }
            }
        }
        let members: usize = self.platoons.values().map(Platoon::size).sum();
        if members != platooned {
            return Err(self.fault(FaultKind::Membership(format!("{members} members vs {platooned} platooned")), vec![]));
        }

        let present = self.agents.len() as u64;
        let queued = self.queued() as u64;
        let exited = self.summary.exited + self.summary.offramp_exited;
        self.summary.present = present;
        self.summary.queued = queued;
        self.summary.steps = self.step;
        if self.summary.arrivals != present + exited + queued {
            let kind = FaultKind::Conservation { spawned: self.summary.arrivals, present, exited, queued };
            return Err(self.fault(kind, vec![]));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::longitudinal::equilibrium_gap;

    fn quiet(config: ScenarioConfig) -> ScenarioConfig {
        ScenarioConfig { demand_vph: 0.0, warmup_s: 0.0, ..config }
    }

    fn hv(id: u64, lane: usize, pos: f64, speed: f64, desired: f64) -> Agent {
        Agent::new(
            VehicleState::new(VehicleId(id), VehicleClass::Hv, lane, pos, speed, 4.5),
            DriverParams::human().with_desired_speed(desired),
        )
    }

    #[test]
    fn integrate_uniform_motion() {
        let mut s = VehicleState::new(VehicleId(0), VehicleClass::Hv, 0, 0.0, 20.0, 4.5);
        integrate(&mut s, 0.0, 0.1);
        assert!((s.position - 2.0).abs() < 1e-12);
        assert_eq!(s.speed, 20.0);
    }

    #[test]
    fn integrate_stops_without_reversing() {
        let mut s = VehicleState::new(VehicleId(0), VehicleClass::Hv, 0, 0.0, 0.05, 4.5);
        integrate(&mut s, -3.0, 0.1);
        assert_eq!(s.speed, 0.0);
        // oracle: distance to standstill v^2 / (2 b)
        assert!((s.position - 0.05 * 0.05 / 6.0).abs() < 1e-12);
        assert!((s.position - 0.000417).abs() < 1e-6);
        assert_eq!(s.accel, -3.0);
    }

    #[test]
    fn integrate_accelerating() {
        let mut s = VehicleState::new(VehicleId(0), VehicleClass::Hv, 0, 0.0, 10.0, 4.5);
        integrate(&mut s, 1.0, 0.1);
        assert!((s.speed - 10.1).abs() < 1e-12);
        assert!((s.position - 1.005).abs() < 1e-12);
    }

    #[test]
    fn empty_world_only_advances_clock() {
        let mut w = World::new(quiet(ScenarioConfig::default())).unwrap();
        let mut log = RunLog::default();
        for _ in 0..10 {
            w.step(&mut log).unwrap();
        }
        assert!((w.time() - 1.0).abs() < 1e-12);
        assert!(w.agents().is_empty() && log.samples.is_empty() && log.events.is_empty());
    }

    #[test]
    fn lone_vehicle_at_desired_speed_cruises() {
        let mut w = World::with_agents(quiet(ScenarioConfig::default()), vec![hv(0, 1, 100.0, 29.0, 29.0)]).unwrap();
        for _ in 0..10 {
            w.step(&mut NullRecorder).unwrap();
        }
        let s = &w.agents()[0].state;
        assert!((s.position - 129.0).abs() < 1e-9);
        assert_eq!(s.accel, 0.0);
    }

    #[test]
    fn free_flow_converges_to_desired_speed() {
        let cfg = quiet(ScenarioConfig { length_m: 100_000.0, ..ScenarioConfig::default() });
        let mut w = World::with_agents(cfg, vec![hv(0, 0, 0.0, 0.0, 29.0)]).unwrap();
        for _ in 0..1200 {
            w.step(&mut NullRecorder).unwrap();
        }
        assert!((w.agents()[0].state.speed - 29.0).abs() < 0.1);
    }

    #[test]
    fn identical_column_settles_to_equilibrium_gap() {
        let cfg = quiet(ScenarioConfig { lane_count: 1, length_m: 1e6, cacc: Default::default(), ..ScenarioConfig::default() });
        let lead_speed = 20.0;
        let mut agents = vec![hv(0, 0, 2000.0, lead_speed, lead_speed)];
        for k in 1..20 {
            agents.push(hv(k, 0, 2000.0 - 40.0 * k as f64, lead_speed, 29.0));
        }
        let mut w = World::with_agents(cfg, agents).unwrap();
        for _ in 0..3000 {
            w.step(&mut NullRecorder).unwrap();
        }
        let expected = equilibrium_gap(lead_speed, &DriverParams::human().with_desired_speed(29.0)).unwrap();
        let a = w.agents();
        for k in 1..20 {
            let gap = a[k].state.gap_to(&a[k - 1].state);
            assert!((gap - expected).abs() < 1e-3, "vehicle {k}: gap {gap} vs {expected}");
        }
    }

    #[test]
    fn jammed_entry_queues_instead_of_overlapping() {
        let cfg = ScenarioConfig { lane_count: 1, demand_vph: 7200.0, warmup_s: 0.0, ..ScenarioConfig::default() };
        let mut w = World::with_agents(cfg, vec![hv(10_000, 0, 3.0, 0.0, 0.001)]).unwrap();
        for _ in 0..100 {
            w.step(&mut NullRecorder).unwrap();
        }
        assert!(w.queued() > 0);
        assert_eq!(w.agents().len(), 1);
    }

    #[test]
    fn discretionary_change_around_slow_vehicle() {
        let cfg = quiet(ScenarioConfig { lane_count: 2, length_m: 10_000.0, ..ScenarioConfig::default() });
        // The slow vehicle is selfish, so it has no reason to make room.
        let mut slow = hv(0, 1, 160.0, 10.0, 10.0);
        slow.params.politeness = 0.0;
        let agents = vec![slow, hv(1, 1, 100.0, 25.0, 29.0), hv(2, 0, 600.0, 29.0, 29.0)];
        let mut w = World::with_agents(cfg, agents).unwrap();
        let mut log = RunLog::default();
        for _ in 0..300 {
            w.step(&mut log).unwrap();
        }
        let changes: Vec<_> = log.events.iter().filter(|e| e.kind == EventKind::LaneChange).collect();
        assert_eq!(changes.len(), 1, "{changes:?}");
        assert_eq!((changes[0].vehicle_id, changes[0].from_lane, changes[0].to_lane), (VehicleId(1), 1, 0));
    }

    #[test]
    fn logs_every_half_second_after_warmup() {
        let cfg = ScenarioConfig { demand_vph: 0.0, warmup_s: 1.0, duration_s: 3.0, ..ScenarioConfig::default() };
        let log = {
            let mut log = RunLog::default();
            World::with_agents(cfg, vec![hv(0, 0, 0.0, 29.0, 29.0)]).unwrap().run(&mut log).unwrap();
            log
        };
        let times: Vec<f64> = log.samples.iter().map(|s| s.time).collect();
        assert_eq!(times, vec![1.0, 1.5, 2.0, 2.5]);
    }

    #[test]
    fn exits_are_counted() {
        let cfg = quiet(ScenarioConfig { length_m: 200.0, duration_s: 20.0, ..ScenarioConfig::default() });
        let summary = World::with_agents(cfg, vec![hv(0, 0, 150.0, 29.0, 29.0)]).unwrap().run(&mut NullRecorder).unwrap();
        assert_eq!(summary.exited, 1);
        assert_eq!(summary.present, 0);
    }

    fn short(strategy: Strategy, mpr: f64, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            strategy,
            mpr,
            seed,
            length_m: 3000.0,
            duration_s: 400.0,
            warmup_s: 100.0,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn short_mixed_runs_hold_invariants() {
        for strategy in [Strategy::AdHoc, Strategy::Local] {
            let summary = run_scenario(&short(strategy, 0.3, 7), &mut NullRecorder).unwrap();
            assert!(summary.exited > 0);
            assert!(summary.max_platoon_size <= 10);
            if strategy == Strategy::AdHoc {
                assert_eq!(summary.join_plans_created, 0);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let run = || {
            let mut log = RunLog::default();
            run_scenario(&short(Strategy::Local, 0.2, 3), &mut log).unwrap();
            log
        };
        let (a, b) = (run(), run());
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.events, b.events);
    }

    #[test]
    fn base_strategy_never_platoons() {
        let mut log = RunLog::default();
        run_scenario(&short(Strategy::Base, 0.0, 2), &mut log).unwrap();
        assert!(log.samples.iter().all(|s| s.class == VehicleClass::Hv && s.platoon_id.is_none()));
    }

    #[test]
    fn ramps_feed_and_drain() {
        let cfg = ScenarioConfig {
            ramps: Some(crate::types::RampConfig {
                on_ramp_position_m: 500.0,
                off_ramp_position_m: 2500.0,
                off_ramp_approach_m: 1000.0,
                off_ramp_share: 0.2,
                on_ramp_demand_vph: 400.0,
            }),
            demand_vph: 5000.0,
            ..short(Strategy::Local, 0.2, 9)
        };
        let summary = run_scenario(&cfg, &mut NullRecorder).unwrap();
        assert!(summary.offramp_exited > 0);
    }
}
