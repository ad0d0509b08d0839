//! Car-following laws: the Intelligent Driver Model, the constant-acceleration
//! heuristic (CAH), and the enhanced IDM that blends the two through the
//! coolness factor.

use crate::error::{Error, Result};
use crate::types::{CaccParams, DriverParams, Role, VehicleClass, VehicleState};

/// Hard floor on any commanded acceleration (tire-road limit).
pub const EMERGENCY_DECEL: f64 = 9.0;

/// What a vehicle perceives of the vehicle directly ahead in its lane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaderView {
    /// Bumper-to-bumper clearance.
    pub gap: f64,
    pub speed: f64,
    pub accel: f64,
}

impl LeaderView {
    pub fn new(gap: f64, speed: f64, accel: f64) -> Self {
        Self { gap, speed, accel }
    }
}

/// Heaviside step with `theta(0) = 1`.
fn theta(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        0.0
    }
}

fn clamp_command(accel: f64, p: &DriverParams) -> f64 {
    accel.clamp(-EMERGENCY_DECEL, p.max_accel)
}

/// Desired dynamic gap `s*`, never below the standstill gap.
pub fn desired_gap(v: f64, v_lead: f64, p: &DriverParams) -> f64 {
    let dynamic = v * p.time_gap + v * (v - v_lead) / (2.0 * (p.max_accel * p.desired_decel).sqrt());
    p.min_gap + dynamic.max(0.0)
}

/// Free-road term `a [1 - (v / v_des)^delta]`.
pub fn free_road_accel(v: f64, p: &DriverParams) -> f64 {
    p.max_accel * (1.0 - (v / p.desired_speed).powf(p.accel_exponent))
}

/// Plain IDM acceleration.
pub fn idm_accel(v: f64, leader: Option<&LeaderView>, p: &DriverParams) -> Result<f64> {
    let free = free_road_accel(v, p);
    let accel = match leader {
        None => free,
        Some(l) => {
            if !(l.gap > 0.0) {
                return Err(Error::DegenerateGap { gap: l.gap });
            }
            let ratio = desired_gap(v, l.speed, p) / l.gap;
            free - p.max_accel * ratio * ratio
        }
    };
    Ok(clamp_command(accel, p))
}

/// Constant-acceleration heuristic: the acceleration that just avoids a
/// collision if the leader keeps its (effective) acceleration.
///
/// The effective leader acceleration is `min(leader.accel, own_accel_idm)`;
/// `own_accel_idm` is already capped by the maximum acceleration.
pub fn cah_accel(v: f64, own_accel_idm: f64, leader: &LeaderView) -> Result<f64> {
    let gap = leader.gap;
    if !(gap > 0.0) {
        return Err(Error::DegenerateGap { gap });
    }
    let v_lead = leader.speed;
    let lead_accel = leader.accel.min(own_accel_idm);
    let denom = v_lead * v_lead - 2.0 * gap * lead_accel;
    // A vanishing denominator only occurs with a stopped, non-decelerating
    // leader; the second branch gives the stopping deceleration there.
    if v_lead * (v - v_lead) <= -2.0 * gap * lead_accel && denom > 1e-12 {
        Ok(v * v * lead_accel / denom)
    } else {
        let dv = v - v_lead;
        Ok(lead_accel - dv * dv * theta(dv) / (2.0 * gap))
    }
}

/// Blend of an IDM and a CAH acceleration through coolness `c` and
/// deceleration scale `b`. Only ever relaxes the IDM braking.
pub fn blend(idm: f64, cah: f64, coolness: f64, desired_decel: f64) -> f64 {
    if idm >= cah {
        idm
    } else {
        (1.0 - coolness) * idm
            + coolness * (cah + desired_decel * ((idm - cah) / desired_decel).tanh())
    }
}

/// Enhanced IDM acceleration used by automated vehicles.
pub fn eidm_accel(v: f64, leader: Option<&LeaderView>, p: &DriverParams) -> Result<f64> {
    let idm = idm_accel(v, leader, p)?;
    let Some(l) = leader else {
        return Ok(idm);
    };
    if p.coolness == 0.0 {
        return Ok(idm);
    }
    let cah = cah_accel(v, idm, l)?;
    Ok(clamp_command(blend(idm, cah, p.coolness, p.desired_decel), p))
}

/// Time gap a vehicle currently aims for.
///
/// `behind_platoon_predecessor` tells whether the vehicle directly ahead in
/// the lane is the preceding member of the vehicle's own platoon; only then
/// does the short intra-platoon gap apply.
pub fn effective_time_gap(
    vehicle: &VehicleState,
    behind_platoon_predecessor: bool,
    cacc: &CaccParams,
    hv_params: &DriverParams,
) -> f64 {
    match (vehicle.class, vehicle.role) {
        (VehicleClass::Hv, _) => hv_params.time_gap,
        (VehicleClass::Cav, Role::Follower) if behind_platoon_predecessor => cacc.follower_time_gap,
        (VehicleClass::Cav, _) => cacc.leader_time_gap,
    }
}

/// Gap at which a vehicle following an equally fast leader keeps a constant
/// speed `v` under IDM. `None` when `v >= v_des`.
pub fn equilibrium_gap(v: f64, p: &DriverParams) -> Option<f64> {
    let free = 1.0 - (v / p.desired_speed).powf(p.accel_exponent);
    (free > 0.0).then(|| desired_gap(v, v, p) / free.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{PlatoonId, VehicleId};
    use approx::assert_relative_eq;

    fn params() -> DriverParams {
        DriverParams {
            max_accel: 1.4,
            desired_decel: 2.0,
            accel_exponent: 4.0,
            desired_speed: 33.3,
            min_gap: 2.0,
            time_gap: 1.5,
            ..DriverParams::human()
        }
    }

    #[test]
    fn desired_gap_examples() {
        let p = params();
        assert_eq!(desired_gap(0.0, 0.0, &p), 2.0);
        assert_relative_eq!(desired_gap(20.0, 20.0, &p), 32.0, epsilon = 1e-12);
        // oracle: 2 + 20*1.5 + 20*5 / (2*sqrt(1.4*2.0))
        let oracle = 2.0 + 30.0 + 100.0 / (2.0 * 2.8f64.sqrt());
        assert_relative_eq!(desired_gap(20.0, 15.0, &p), oracle, epsilon = 1e-12);
        assert_relative_eq!(oracle, 61.881, epsilon = 1e-3);
    }

    #[test]
    fn desired_gap_floored_at_standstill_gap() {
        let p = params();
        // Fast-opening leader would make the raw expression negative.
        assert_eq!(desired_gap(5.0, 40.0, &p), p.min_gap);
    }

    #[test]
    fn idm_free_road() {
        let p = params();
        assert_relative_eq!(idm_accel(33.3, None, &p).unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(idm_accel(0.0, None, &p).unwrap(), 1.4, epsilon = 1e-12);
    }

    #[test]
    fn idm_following_equal_speed() {
        let p = params();
        let l = LeaderView::new(32.0, 20.0, 0.0);
        let oracle = 1.4 * (1.0 - (20.0f64 / 33.3).powi(4) - 1.0);
        let got = idm_accel(20.0, Some(&l), &p).unwrap();
        assert_relative_eq!(got, oracle, epsilon = 1e-12);
        assert_relative_eq!(got, -0.182, epsilon = 1e-3);
    }

    #[test]
    fn idm_rejects_non_positive_gap() {
        let p = params();
        let l = LeaderView::new(0.0, 20.0, 0.0);
        assert_eq!(idm_accel(20.0, Some(&l), &p), Err(Error::DegenerateGap { gap: 0.0 }));
        assert!(eidm_accel(20.0, Some(&LeaderView::new(-1.0, 0.0, 0.0)), &p).is_err());
        assert!(cah_accel(20.0, 0.0, &LeaderView::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn idm_clamped_to_emergency_floor() {
        let p = params();
        let l = LeaderView::new(0.5, 0.0, 0.0);
        assert_eq!(idm_accel(30.0, Some(&l), &p).unwrap(), -EMERGENCY_DECEL);
    }

    #[test]
    fn cah_zero_cases() {
        assert_eq!(cah_accel(20.0, 0.0, &LeaderView::new(30.0, 20.0, 0.0)).unwrap(), 0.0);
        assert_eq!(cah_accel(20.0, 0.0, &LeaderView::new(30.0, 25.0, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn cah_braking_leader_branch_one() {
        // v = v_lead = 20, effective leader accel -6, gap 40.
        // Branch test: 20 * 0 <= -2 * 40 * (-6) = 480 -> first branch.
        // Value: 400 * (-6) / (400 + 480) = -2400 / 880.
        let l = LeaderView::new(40.0, 20.0, -6.0);
        let got = cah_accel(20.0, 0.5, &l).unwrap();
        assert_relative_eq!(got, -2400.0 / 880.0, epsilon = 1e-12);
    }

    #[test]
    fn cah_uses_smaller_of_leader_and_own_accel() {
        let l = LeaderView::new(40.0, 20.0, 1.0);
        // own IDM accel -2 is smaller than the leader's +1.
        let got = cah_accel(20.0, -2.0, &l).unwrap();
        assert_relative_eq!(got, 400.0 * -2.0 / (400.0 + 160.0), epsilon = 1e-12);
    }

    #[test]
    fn cah_stopped_leader_falls_back_to_stopping_decel() {
        // Stopped leader, no leader deceleration: denominator vanishes.
        let l = LeaderView::new(50.0, 0.0, 0.0);
        let got = cah_accel(10.0, 0.0, &l).unwrap();
        assert_relative_eq!(got, -100.0 / 100.0, epsilon = 1e-12);
    }

    #[test]
    fn eidm_collapses_to_idm_without_coolness_or_leader() {
        let p = DriverParams { coolness: 0.0, ..params() };
        let l = LeaderView::new(5.0, 20.0, 0.0);
        assert_eq!(eidm_accel(20.0, Some(&l), &p).unwrap(), idm_accel(20.0, Some(&l), &p).unwrap());
        let cool = DriverParams { coolness: 0.99, ..params() };
        assert_eq!(eidm_accel(12.0, None, &cool).unwrap(), idm_accel(12.0, None, &cool).unwrap());
    }

    #[test]
    fn eidm_relaxes_cut_in_braking() {
        let p = DriverParams { coolness: 0.99, ..params() };
        let l = LeaderView::new(5.0, 20.0, 0.0);
        let idm = idm_accel(20.0, Some(&l), &p).unwrap();
        // IDM saturates at the emergency floor for this cut-in.
        assert_eq!(idm, -9.0);
        // Oracle: effective leader accel min(0, -9) = -9, first CAH branch:
        // 400 * (-9) / (400 + 90); blend with c = 0.99 and b = 2.
        let cah = 400.0 * -9.0 / (400.0 + 90.0);
        let oracle = 0.01 * idm + 0.99 * (cah + 2.0 * ((idm - cah) / 2.0).tanh());
        let got = eidm_accel(20.0, Some(&l), &p).unwrap();
        assert_relative_eq!(got, oracle, epsilon = 1e-12);
        assert!(got > idm);
    }

    #[test]
    fn time_gap_selection() {
        let cacc = CaccParams::default();
        let hv_params = params();
        let hv = VehicleState::new(VehicleId(1), VehicleClass::Hv, 0, 0.0, 0.0, 4.5);
        assert_eq!(effective_time_gap(&hv, false, &cacc, &hv_params), 1.5);
        let mut cav = VehicleState::new(VehicleId(2), VehicleClass::Cav, 0, 0.0, 0.0, 4.5);
        assert_eq!(effective_time_gap(&cav, false, &cacc, &hv_params), cacc.leader_time_gap);
        cav.role = Role::Follower;
        cav.platoon_id = Some(PlatoonId(0));
        assert_eq!(effective_time_gap(&cav, true, &cacc, &hv_params), 0.6);
        assert_eq!(effective_time_gap(&cav, false, &cacc, &hv_params), cacc.leader_time_gap);
        cav.role = Role::Leader;
        assert_eq!(effective_time_gap(&cav, true, &cacc, &hv_params), cacc.leader_time_gap);
    }

    #[test]
    fn equilibrium_gap_zeroes_idm() {
        let p = params();
        let s = equilibrium_gap(20.0, &p).unwrap();
        let a = idm_accel(20.0, Some(&LeaderView::new(s, 20.0, 0.0)), &p).unwrap();
        assert!(a.abs() < 1e-12);
        assert!(equilibrium_gap(33.3, &p).is_none());
    }

    #[test]
    fn free_flow_monotone_decreasing() {
        let p = params();
        let mut prev = idm_accel(0.0, None, &p).unwrap();
        for i in 1..333 {
            let v = i as f64 * 0.1;
            let a = idm_accel(v, None, &p).unwrap();
            assert!(a < prev, "not decreasing at v = {v}");
            prev = a;
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn eidm_never_brakes_harder_than_idm(
                v in 0.0..40.0f64,
                gap in 0.1..200.0f64,
                v_lead in 0.0..40.0f64,
                a_lead in -9.0..2.0f64,
                c in 0.0..=1.0f64,
            ) {
                let p = DriverParams { coolness: c, ..params() };
                let l = LeaderView::new(gap, v_lead, a_lead);
                let idm = idm_accel(v, Some(&l), &p).unwrap();
                let eidm = eidm_accel(v, Some(&l), &p).unwrap();
                prop_assert!(eidm >= idm);
                prop_assert!(eidm <= p.max_accel);
            }

            #[test]
            fn desired_gap_at_least_min_gap(v in 0.0..50.0f64, v_lead in 0.0..50.0f64) {
                let p = params();
                prop_assert!(desired_gap(v, v_lead, &p) >= p.min_gap);
            }
        }
    }
}
