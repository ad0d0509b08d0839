//! Arrival process at the upstream boundary (and the optional on-ramp).
//!
//! Every random quantity of an arrival is drawn from its own ChaCha stream,
//! so two runs that differ only in market penetration see the same arrival
//! times, desired speeds and lane choices (common random numbers); only the
//! class assignment changes.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::road::Route;
use crate::types::{DriverParams, VehicleClass};

/// Stream numbers; each source gets a block of them.
const HEADWAY: u64 = 0;
const CLASS: u64 = 1;
const SPEED: u64 = 2;
const ROUTE: u64 = 3;
const LANE: u64 = 4;
const STREAMS_PER_SOURCE: u64 = 8;

/// An arrival waiting to be admitted onto the road.
#[derive(Debug, Clone, PartialEq)]
pub struct Arrival {
    pub time: f64,
    pub class: VehicleClass,
    pub desired_speed: f64,
    pub route: Route,
    /// Uniform draw in [0, 1) used to pick among acceptable entry lanes.
    pub lane_draw: f64,
}

/// Parameters of one arrival source.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandSpec {
    pub demand_vph: f64,
    /// Lower bound of the headway between consecutive arrivals.
    pub min_headway_s: f64,
    pub mpr: f64,
    pub hv_desired_speed: f64,
    pub cav_desired_speed: f64,
    /// Human desired speeds are uniform in `v * (1 ± spread)`.
    pub desired_speed_spread: f64,
    pub off_ramp_share: f64,
}

impl DemandSpec {
    pub fn mean_headway(&self) -> f64 {
        3600.0 / self.demand_vph
    }
}

/// Minimum network-level headway: the per-lane minimum `s0 / v_entry + 1 s`
/// shared among the lanes, never above the mean headway.
pub fn network_min_headway(p: &DriverParams, entry_speed: f64, lanes: usize, demand_vph: f64) -> f64 {
    let per_lane = p.min_gap / entry_speed + 1.0;
    let shift = per_lane / lanes.max(1) as f64;
    if demand_vph > 0.0 {
        shift.min(3600.0 / demand_vph)
    } else {
        shift
    }
}

/// Shifted-exponential arrival generator.
#[derive(Debug, Clone)]
pub struct Demand {
    spec: DemandSpec,
    headway: ChaCha8Rng,
    class: ChaCha8Rng,
    speed: ChaCha8Rng,
    route: ChaCha8Rng,
    lane: ChaCha8Rng,
    exp: Option<Exp<f64>>,
    next_time: f64,
}

fn stream(seed: u64, n: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n);
    rng
}

impl Demand {
    /// `source` distinguishes independent arrival sources of one run.
    pub fn new(spec: DemandSpec, seed: u64, source: u64) -> Self {
        let base = source * STREAMS_PER_SOURCE;
        let excess = if spec.demand_vph > 0.0 { spec.mean_headway() - spec.min_headway_s } else { 0.0 };
        let exp = (excess > 0.0).then(|| Exp::new(1.0 / excess).expect("positive rate"));
        let mut d = Self {
            headway: stream(seed, base + HEADWAY),
            class: stream(seed, base + CLASS),
            speed: stream(seed, base + SPEED),
            route: stream(seed, base + ROUTE),
            lane: stream(seed, base + LANE),
            exp,
            spec,
            next_time: f64::INFINITY,
        };
        if d.spec.demand_vph > 0.0 {
            d.next_time = d.draw_headway();
        }
        d
    }

    fn draw_headway(&mut self) -> f64 {
        let extra = self.exp.map_or(0.0, |e| e.sample(&mut self.headway));
        self.spec.min_headway_s + extra
    }

    fn draw(&mut self, time: f64) -> Arrival {
        let s = &self.spec;
        let u_class: f64 = self.class.gen();
        let u_speed: f64 = self.speed.gen();
        let u_route: f64 = self.route.gen();
        let lane_draw: f64 = self.lane.gen();
        let class = if u_class < s.mpr { VehicleClass::Cav } else { VehicleClass::Hv };
        let desired_speed = match class {
            VehicleClass::Hv => s.hv_desired_speed * (1.0 + s.desired_speed_spread * (2.0 * u_speed - 1.0)),
            VehicleClass::Cav => s.cav_desired_speed,
        };
        let route = if u_route < s.off_ramp_share { Route::OffRamp } else { Route::Through };
        Arrival { time, class, desired_speed, route, lane_draw }
    }

    /// All arrivals with arrival time `<= until`, in order.
    pub fn arrivals_until(&mut self, until: f64) -> Vec<Arrival> {
        let mut out = Vec::new();
        while self.next_time <= until {
            let t = self.next_time;
            out.push(self.draw(t));
            self.next_time = t + self.draw_headway();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(demand: f64, mpr: f64) -> DemandSpec {
        DemandSpec {
            demand_vph: demand,
            min_headway_s: 0.25,
            mpr,
            hv_desired_speed: 29.0,
            cav_desired_speed: 29.0,
            desired_speed_spread: 0.1,
            off_ramp_share: 0.0,
        }
    }

    #[test]
    fn zero_mpr_only_humans() {
        let mut d = Demand::new(spec(8000.0, 0.0), 3, 0);
        let a = d.arrivals_until(600.0);
        assert!(!a.is_empty());
        assert!(a.iter().all(|x| x.class == VehicleClass::Hv));
    }

    #[test]
    fn mean_headway_matches_demand() {
        let mut d = Demand::new(spec(3600.0, 0.0), 11, 0);
        let a = d.arrivals_until(20000.0);
        let rate = a.len() as f64 / 20000.0;
        assert!((rate - 1.0).abs() < 0.03, "rate {rate}");
        assert!(a.windows(2).all(|w| w[1].time - w[0].time >= 0.25 - 1e-12));
    }

    #[test]
    fn common_random_numbers_across_mpr() {
        let a = Demand::new(spec(8000.0, 0.1), 5, 0).arrivals_until(900.0);
        let b = Demand::new(spec(8000.0, 0.3), 5, 0).arrivals_until(900.0);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.time, y.time);
            assert_eq!(x.lane_draw, y.lane_draw);
            // CAVs at the lower rate stay CAVs at the higher rate.
            if x.class == VehicleClass::Cav {
                assert_eq!(y.class, VehicleClass::Cav);
            }
        }
        let share = b.iter().filter(|x| x.class == VehicleClass::Cav).count() as f64 / b.len() as f64;
        assert!((share - 0.3).abs() < 0.03, "share {share}");
    }

    #[test]
    fn desired_speeds_within_spread() {
        let a = Demand::new(spec(8000.0, 0.0), 1, 0).arrivals_until(600.0);
        assert!(a.iter().all(|x| (26.1..=31.9).contains(&x.desired_speed)));
    }

    #[test]
    fn min_headway_shared_among_lanes() {
        let p = DriverParams::human();
        let h = network_min_headway(&p, 29.0, 4, 8000.0);
        assert!((h - (2.0 / 29.0 + 1.0) / 4.0).abs() < 1e-12);
        assert_eq!(network_min_headway(&p, 29.0, 1, 7200.0), 0.5);
    }

    #[test]
    fn no_demand_no_arrivals() {
        let mut d = Demand::new(spec(0.0, 0.0), 1, 0);
        assert!(d.arrivals_until(1e6).is_empty());
    }
}
