//! Measures computed from the trajectory and event logs.
//!
//! Everything here is a pure function of the (post-warm-up) records. The
//! [`ReportBuilder`] computes all measures in one streaming pass and can be
//! plugged into a run directly as its [`Recorder`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::engine::Recorder;
use crate::error::{Error, Result};
use crate::types::{Event, EventKind, Role, TrajectorySample, VehicleClass, VehicleId};

pub const METERS_PER_MILE: f64 = 1609.344;
/// Samples with an acceleration strictly below this count as hard braking.
pub const HARD_BRAKE_THRESHOLD_MPS2: f64 = -3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Productivity {
    pub vmt_mi: f64,
    pub vht_h: f64,
    /// VMT / VHT, mi/h.
    pub q_mph: f64,
}

/// First and last logged (time, position) of every vehicle.
#[derive(Debug, Clone, Default)]
struct Spans {
    spans: BTreeMap<VehicleId, [(f64, f64); 2]>,
}

impl Spans {
    fn add(&mut self, s: &TrajectorySample) {
        self.spans
            .entry(s.vehicle_id)
            .and_modify(|span| {
                if s.time < span[0].0 {
                    span[0] = (s.time, s.position);
                }
                if s.time > span[1].0 {
                    span[1] = (s.time, s.position);
                }
            })
            .or_insert([(s.time, s.position); 2]);
    }

    fn productivity(&self) -> Result<Productivity> {
        if self.spans.is_empty() {
            return Err(Error::Empty("trajectory log"));
        }
        let (meters, seconds) = self
            .spans
            .values()
            .fold((0.0, 0.0), |(m, s), [(t0, x0), (t1, x1)]| (m + (x1 - x0), s + (t1 - t0)));
        let vmt_mi = meters / METERS_PER_MILE;
        let vht_h = seconds / 3600.0;
        let q_mph = if vht_h > 0.0 { vmt_mi / vht_h } else { 0.0 };
        Ok(Productivity { vmt_mi, vht_h, q_mph })
    }
}

/// Vehicle-miles, vehicle-hours and their ratio. Each vehicle contributes
/// the distance and time between its first and last logged sample.
pub fn compute_q(samples: &[TrajectorySample]) -> Result<Productivity> {
    let mut spans = Spans::default();
    samples.iter().for_each(|s| spans.add(s));
    spans.productivity()
}

/// Downstream exits in `[window_start, window_start + window_s]`, per hour.
pub fn compute_throughput(events: &[Event], window_start: f64, window_s: f64) -> f64 {
    let exits = events
        .iter()
        .filter(|e| e.kind == EventKind::Exit && e.time >= window_start && e.time <= window_start + window_s)
        .count();
    throughput(exits as u64, window_s)
}

fn throughput(exits: u64, window_s: f64) -> f64 {
    if window_s > 0.0 {
        exits as f64 * 3600.0 / window_s
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardBrakeObservation {
    pub time: f64,
    pub vehicle_id: VehicleId,
    pub accel: f64,
    /// Class of the vehicle ahead in the same sample; `None` without leader.
    pub partner_class: Option<VehicleClass>,
    pub lane: usize,
}

fn observe(s: &TrajectorySample, threshold: f64) -> Option<HardBrakeObservation> {
    (s.class == VehicleClass::Hv && s.accel < threshold).then_some(HardBrakeObservation {
        time: s.time,
        vehicle_id: s.vehicle_id,
        accel: s.accel,
        partner_class: s.leader_class,
        lane: s.lane,
    })
}

/// One observation per logged human-driven sample braking harder than
/// `threshold` (strictly below it).
pub fn detect_hard_braking(samples: &[TrajectorySample], threshold: f64) -> Vec<HardBrakeObservation> {
    samples.iter().filter_map(|s| observe(s, threshold)).collect()
}

/// A run of consecutive hard-brake samples of one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrakeEpisode {
    pub vehicle_id: VehicleId,
    pub start: f64,
    pub end: f64,
    /// Strongest deceleration of the episode.
    pub min_accel: f64,
    pub partner_class: Option<VehicleClass>,
}

/// Coalesces observations of the same vehicle that are `log_dt` apart.
/// The partner of an episode is the one seen at its first sample.
pub fn merge_episodes(observations: &[HardBrakeObservation], log_dt: f64) -> Vec<BrakeEpisode> {
    let mut sorted: Vec<&HardBrakeObservation> = observations.iter().collect();
    sorted.sort_by(|a, b| a.vehicle_id.cmp(&b.vehicle_id).then(a.time.total_cmp(&b.time)));
    let mut out: Vec<BrakeEpisode> = Vec::new();
    for o in sorted {
        match out.last_mut() {
            Some(e) if e.vehicle_id == o.vehicle_id && (o.time - e.end) <= log_dt * 1.5 => {
                e.end = o.time;
                e.min_accel = e.min_accel.min(o.accel);
            }
            _ => out.push(BrakeEpisode {
                vehicle_id: o.vehicle_id,
                start: o.time,
                end: o.time,
                min_accel: o.accel,
                partner_class: o.partner_class,
            }),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardBrakeCounts {
    pub total: u64,
    pub hv_partner: u64,
    pub cav_partner: u64,
    pub no_partner: u64,
}

impl HardBrakeCounts {
    pub fn add(&mut self, partner: Option<VehicleClass>) {
        self.total += 1;
        match partner {
            Some(VehicleClass::Hv) => self.hv_partner += 1,
            Some(VehicleClass::Cav) => self.cav_partner += 1,
            None => self.no_partner += 1,
        }
    }

    pub fn from_observations(obs: &[HardBrakeObservation]) -> Self {
        let mut c = Self::default();
        obs.iter().for_each(|o| c.add(o.partner_class));
        c
    }
}

/// Right-continuous empirical distribution function.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("cdf samples"));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Share of samples `<= x`.
    pub fn eval(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&s| s <= x) as f64 / self.sorted.len() as f64
    }

    /// Distinct sample values with the distribution value at each, ascending.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let n = self.sorted.len() as f64;
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (i, &x) in self.sorted.iter().enumerate() {
            let f = (i + 1) as f64 / n;
            match out.last_mut() {
                Some(last) if last.0 == x => last.1 = f,
                _ => out.push((x, f)),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub d: f64,
    pub p_value: f64,
    pub reject: bool,
    pub n_a: usize,
    pub n_b: usize,
}

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // The alternating series converges slowly here; use the theta-function
        // form of the distribution function instead.
        let c = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let sum: f64 = (1..=8).map(|k| ((2 * k - 1) as f64).powi(2)).map(|m| (c * m).exp()).sum();
        return (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * sum).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64], alpha: f64) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("ks sample"));
    }
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = na * nb / (na + nb);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    let p_value = kolmogorov_q(lambda);
    Ok(KsResult { d, p_value, reject: p_value < alpha, n_a: xa.len(), n_b: xb.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneChangeStats {
    pub total: u64,
    pub avg_per_hv: f64,
    pub hv_count: u64,
}

/// Discretionary lane changes of human drivers and their average per human
/// driver present in the log. CAV and mandatory changes are not counted.
pub fn lane_change_stats(events: &[Event], samples: &[TrajectorySample]) -> LaneChangeStats {
    let total = events.iter().filter(|e| counts_as_lane_change(e)).count() as u64;
    let hvs: BTreeSet<VehicleId> = samples.iter().filter(|s| s.class == VehicleClass::Hv).map(|s| s.vehicle_id).collect();
    lane_change_summary(total, hvs.len() as u64)
}

fn counts_as_lane_change(e: &Event) -> bool {
    e.kind == EventKind::LaneChange && e.class == VehicleClass::Hv
}

fn lane_change_summary(total: u64, hv_count: u64) -> LaneChangeStats {
    let avg_per_hv = if hv_count > 0 { total as f64 / hv_count as f64 } else { 0.0 };
    LaneChangeStats { total, avg_per_hv, hv_count }
}

/// Accelerations of the hard-brake observations, split by partner class.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HardBrakeSamples {
    pub hv_partner: Vec<f64>,
    pub cav_partner: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub vmt_mi: f64,
    pub vht_h: f64,
    pub q_mph: f64,
    pub throughput_vph: f64,
    pub exits: u64,
    pub window_s: f64,
    pub hard_brake_counts: HardBrakeCounts,
    /// Hard-brake counts after merging consecutive samples into episodes.
    pub hard_brake_episodes: HardBrakeCounts,
    pub hard_brake_samples: HardBrakeSamples,
    pub lane_change_total: u64,
    pub avg_lane_change_per_hv: f64,
    pub hv_count: u64,
    pub cav_count: u64,
    /// Share of CAV samples taken while in a platoon.
    pub platoon_ratio: f64,
}

/// One-pass computation of a [`ScenarioReport`].
#[derive(Debug, Clone)]
pub struct ReportBuilder {
    warmup_s: f64,
    window_s: f64,
    log_dt: f64,
    threshold: f64,
    spans: Spans,
    hvs: BTreeSet<VehicleId>,
    cavs: BTreeSet<VehicleId>,
    cav_samples: u64,
    platooned_samples: u64,
    observations: Vec<HardBrakeObservation>,
    exits: u64,
    lane_changes: u64,
}

impl ReportBuilder {
    /// Measures over `[warmup_s, duration_s]`; `log_dt` is the sampling interval.
    pub fn new(warmup_s: f64, duration_s: f64, log_dt: f64) -> Self {
        Self {
            warmup_s,
            window_s: duration_s - warmup_s,
            log_dt,
            threshold: HARD_BRAKE_THRESHOLD_MPS2,
            spans: Spans::default(),
            hvs: BTreeSet::new(),
            cavs: BTreeSet::new(),
            cav_samples: 0,
            platooned_samples: 0,
            observations: Vec::new(),
            exits: 0,
            lane_changes: 0,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    fn in_window(&self, t: f64) -> bool {
        t >= self.warmup_s - 1e-9 && t <= self.warmup_s + self.window_s + 1e-9
    }

    pub fn add_sample(&mut self, s: &TrajectorySample) {
        if !self.in_window(s.time) {
            return;
        }
        self.spans.add(s);
        match s.class {
            VehicleClass::Hv => {
                self.hvs.insert(s.vehicle_id);
            }
            VehicleClass::Cav => {
                self.cavs.insert(s.vehicle_id);
                self.cav_samples += 1;
                if matches!(s.role, Role::Leader | Role::Follower) {
                    self.platooned_samples += 1;
                }
            }
        }
        if let Some(o) = observe(s, self.threshold) {
            self.observations.push(o);
        }
    }

    pub fn add_event(&mut self, e: &Event) {
        if !self.in_window(e.time) {
            return;
        }
        if e.kind == EventKind::Exit {
            self.exits += 1;
        }
        if counts_as_lane_change(e) {
            self.lane_changes += 1;
        }
    }

    pub fn finish(&self) -> Result<ScenarioReport> {
        let prod = self.spans.productivity()?;
        let lc = lane_change_summary(self.lane_changes, self.hvs.len() as u64);
        let mut samples = HardBrakeSamples::default();
        for o in &self.observations {
            match o.partner_class {
                Some(VehicleClass::Hv) => samples.hv_partner.push(o.accel),
                Some(VehicleClass::Cav) => samples.cav_partner.push(o.accel),
                None => {}
            }
        }
        let mut episodes = HardBrakeCounts::default();
        merge_episodes(&self.observations, self.log_dt).iter().for_each(|e| episodes.add(e.partner_class));
        Ok(ScenarioReport {
            vmt_mi: prod.vmt_mi,
            vht_h: prod.vht_h,
            q_mph: prod.q_mph,
            throughput_vph: throughput(self.exits, self.window_s),
            exits: self.exits,
            window_s: self.window_s,
            hard_brake_counts: HardBrakeCounts::from_observations(&self.observations),
            hard_brake_episodes: episodes,
            hard_brake_samples: samples,
            lane_change_total: lc.total,
            avg_lane_change_per_hv: lc.avg_per_hv,
            hv_count: lc.hv_count,
            cav_count: self.cavs.len() as u64,
            platoon_ratio: if self.cav_samples > 0 {
                self.platooned_samples as f64 / self.cav_samples as f64
            } else {
                0.0
            },
        })
    }
}

impl Recorder for ReportBuilder {
    fn sample(&mut self, sample: &TrajectorySample) {
        self.add_sample(sample);
    }

    fn event(&mut self, event: &Event) {
        self.add_event(event);
    }
}
