//! Rule-based ego driver used as the return baseline.

use super::driver::{leader_of, IdmParams, LaneChangeRule};
use super::{EgoAction, Lateral, TrafficState, Vehicle, TIME_GAP};

/// IDM accelerations below this map to the hard brake, m/s².
pub const HARD_BRAKE_THRESHOLD: f64 = -2.5;
/// Desired speed of the IDM term; above the ego's speed cap so that free
/// flow quantizes to +1 all the way up to the cap.
pub const HEURISTIC_DESIRED_SPEED: f64 = 30.0;

/// Car-following law with a headway long enough to stay out of the
/// penalized time gap.
pub fn heuristic_idm() -> IdmParams {
    IdmParams {
        time_headway: 3.0,
        ..IdmParams::default()
    }
}

pub fn heuristic_lane_change_rule() -> LaneChangeRule {
    LaneChangeRule {
        idm: heuristic_idm(),
        min_time_gap: Some(TIME_GAP),
        ..LaneChangeRule::default()
    }
}

/// Maps a continuous acceleration to the nearest available command.
pub fn quantize_acceleration(accel: f64) -> f64 {
    if accel < HARD_BRAKE_THRESHOLD {
        -4.0
    } else if accel < -0.5 {
        -1.0
    } else if accel <= 0.5 {
        0.0
    } else {
        1.0
    }
}

/// Action of the heuristic driver for the ego `vehicles[0]`.
pub fn heuristic_action(vehicles: &[Vehicle]) -> EgoAction {
    let ego = &vehicles[0];
    let leader = leader_of(vehicles, 0).map(|(j, gap)| (gap, vehicles[j].vx));
    let accel = quantize_acceleration(heuristic_idm().acceleration(ego.vx, HEURISTIC_DESIRED_SPEED, leader));
    if accel == -4.0 {
        return EgoAction::HARD_BRAKE;
    }
    let lateral = heuristic_lane_change_rule().intent(vehicles, 0);
    EgoAction::compose(accel, lateral).unwrap_or(EgoAction::compose(accel, Lateral::Stay).expect("valid command"))
}

pub fn heuristic_driver_policy(state: &TrafficState) -> EgoAction {
    heuristic_action(&state.vehicles)
}
