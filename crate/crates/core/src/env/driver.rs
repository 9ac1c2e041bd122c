//! Surrounding-vehicle driver model: Intelligent Driver Model car following
//! and an uncooperative gap-acceptance overtaking rule that may pass on
//! either side.

use super::action::Lateral;
use super::vehicle::{DriverKind, Vehicle};
use super::{LANE_COUNT, TIME_GAP};

/// Most negative acceleration any driver model commands, m/s².
pub const MAX_DECELERATION: f64 = 9.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdmParams {
    pub max_accel: f64,
    pub comfortable_decel: f64,
    pub min_gap: f64,
    pub time_headway: f64,
    pub exponent: i32,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            max_accel: 2.6,
            comfortable_decel: 4.5,
            min_gap: 2.0,
            time_headway: 1.0,
            exponent: 4,
        }
    }
}

impl IdmParams {
    /// IDM acceleration for speed `v` toward `desired`, optionally behind a
    /// leader given as (bumper-to-bumper gap, leader speed). Clamped to
    /// `[-MAX_DECELERATION, max_accel]`.
    pub fn acceleration(&self, v: f64, desired: f64, leader: Option<(f64, f64)>) -> f64 {
        let free = if desired > 0.0 {
            1.0 - (v.max(0.0) / desired).powi(self.exponent)
        } else {
            1.0
        };
        let interaction = match leader {
            Some((gap, leader_speed)) => {
                let dv = v - leader_speed;
                let dynamic = v * self.time_headway
                    + v * dv / (2.0 * (self.max_accel * self.comfortable_decel).sqrt());
                let desired_gap = self.min_gap + dynamic.max(0.0);
                let gap = gap.max(1e-3);
                (desired_gap / gap).powi(2)
            }
            None => 0.0,
        };
        (self.max_accel * (free - interaction)).clamp(-MAX_DECELERATION, self.max_accel)
    }

    /// Gap a follower at `v` wants behind a leader at `leader_speed` before
    /// the interaction term exceeds one.
    pub fn desired_gap(&self, v: f64, leader_speed: f64) -> f64 {
        let dv = v - leader_speed;
        self.min_gap
            + (v * self.time_headway + v * dv / (2.0 * (self.max_accel * self.comfortable_decel).sqrt()))
                .max(0.0)
    }
}

/// Longitudinal law for a surrounding vehicle behind a leader at
/// `leader_gap` m moving at `leader_speed`, or on a free road.
pub fn surrounding_accel(vehicle: &Vehicle, leader: Option<(f64, f64)>) -> f64 {
    match vehicle.driver {
        DriverKind::Idm => IdmParams::default().acceleration(vehicle.vx, vehicle.desired_speed, leader),
        DriverKind::Stationary | DriverKind::ConstantVelocity => 0.0,
    }
}

/// Nearest vehicle ahead of `i` in any lane `i` occupies, as
/// (index, bumper-to-bumper gap).
pub fn leader_of(vehicles: &[Vehicle], i: usize) -> Option<(usize, f64)> {
    let me = &vehicles[i];
    let mut best: Option<(usize, f64)> = None;
    for (j, other) in vehicles.iter().enumerate() {
        if j == i || !me.shares_lane_with(other) || !is_ahead(other, j, me, i) {
            continue;
        }
        if best.map_or(true, |(b, _)| other.x < vehicles[b].x) {
            best = Some((j, other.rear() - me.x));
        }
    }
    best
}

/// Nearest vehicle ahead of `i` in each lane it occupies, as (index, gap).
/// Mid-change a vehicle has to respect both.
pub fn leaders_of(vehicles: &[Vehicle], i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
    let me = &vehicles[i];
    std::iter::once(me.lane)
        .chain(me.target_lane)
        .filter_map(move |lane| leader_in_lane(vehicles, lane, me.x, i))
}

/// Nearest vehicle ahead of position `x` in `lane`, skipping `skip`.
pub fn leader_in_lane(vehicles: &[Vehicle], lane: usize, x: f64, skip: usize) -> Option<(usize, f64)> {
    vehicles
        .iter()
        .enumerate()
        .filter(|&(j, v)| j != skip && v.occupies(lane) && (v.x > x || (v.x == x && j > skip)))
        .min_by(|a, b| a.1.x.total_cmp(&b.1.x))
        .map(|(j, v)| (j, v.rear() - x))
}

/// Nearest vehicle behind a body whose rear bumper is at `rear` (front at
/// `x`) in `lane`, skipping `skip`; returns (index, gap).
pub fn follower_in_lane(
    vehicles: &[Vehicle],
    lane: usize,
    x: f64,
    rear: f64,
    skip: usize,
) -> Option<(usize, f64)> {
    vehicles
        .iter()
        .enumerate()
        .filter(|&(j, v)| j != skip && v.occupies(lane) && (v.x < x || (v.x == x && j < skip)))
        .max_by(|a, b| a.1.x.total_cmp(&b.1.x))
        .map(|(j, v)| (j, rear - v.x))
}

fn is_ahead(other: &Vehicle, j: usize, me: &Vehicle, i: usize) -> bool {
    other.x > me.x || (other.x == me.x && j > i)
}

/// Parameters of the overtaking rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaneChangeRule {
    pub idm: IdmParams,
    /// Leaders farther away than this do not limit anticipated speed, m.
    pub lookahead: f64,
    /// Change only when the current lane costs more than this, m/s.
    pub speed_deficit: f64,
    /// Largest braking the change may impose on anyone, m/s².
    pub max_imposed_decel: f64,
    /// When set, the new leader must also be at least this many seconds
    /// ahead at the changer's speed.
    pub min_time_gap: Option<f64>,
    /// The new follower must be at least this many seconds behind at its
    /// own speed.
    pub min_follower_time_gap: f64,
}

impl Default for LaneChangeRule {
    fn default() -> Self {
        LaneChangeRule {
            idm: IdmParams::default(),
            lookahead: 100.0,
            speed_deficit: 1.0,
            max_imposed_decel: 4.5,
            min_time_gap: None,
            min_follower_time_gap: TIME_GAP,
        }
    }
}

impl LaneChangeRule {
    fn anticipated_speed(&self, vehicles: &[Vehicle], i: usize, lane: usize) -> f64 {
        let me = &vehicles[i];
        match leader_in_lane(vehicles, lane, me.x, i) {
            Some((j, gap)) if gap < self.lookahead => me.desired_speed.min(vehicles[j].vx),
            _ => me.desired_speed,
        }
    }

    fn is_safe(&self, vehicles: &[Vehicle], i: usize, lane: usize) -> bool {
        let me = &vehicles[i];
        if let Some((j, gap)) = leader_in_lane(vehicles, lane, me.x, i) {
            let leader = &vehicles[j];
            if gap < self.idm.min_gap {
                return false;
            }
            let own = self.idm.acceleration(me.vx, me.desired_speed, Some((gap, leader.vx)));
            if own < -self.max_imposed_decel {
                return false;
            }
            if let Some(t) = self.min_time_gap {
                if gap < t * me.vx {
                    return false;
                }
            }
        }
        if let Some((j, gap)) = follower_in_lane(vehicles, lane, me.x, me.rear(), i) {
            let follower = &vehicles[j];
            if gap < self.idm.min_gap || gap < self.min_follower_time_gap * follower.vx {
                return false;
            }
            let imposed = match follower.driver {
                DriverKind::Idm => IdmParams::default().acceleration(
                    follower.vx,
                    follower.desired_speed,
                    Some((gap, me.vx)),
                ),
                // Vehicles that cannot brake are only safe behind us when
                // they are not closing in.
                _ if follower.vx > me.vx => f64::NEG_INFINITY,
                _ => 0.0,
            };
            if imposed < -self.max_imposed_decel {
                return false;
            }
        }
        true
    }

    /// Lateral intent of vehicle `i`: change toward an adjacent lane when the
    /// current leader holds it more than `speed_deficit` below its desired
    /// speed, the other lane promises a higher speed, and the change forces
    /// nobody to brake harder than `max_imposed_decel`. Never yields to
    /// others. Prefers the faster lane, then the left.
    pub fn intent(&self, vehicles: &[Vehicle], i: usize) -> Lateral {
        let me = &vehicles[i];
        if me.is_changing_lanes() {
            return Lateral::Stay;
        }
        let current = self.anticipated_speed(vehicles, i, me.lane);
        if current >= me.desired_speed - self.speed_deficit {
            return Lateral::Stay;
        }
        let mut best: Option<(Lateral, f64)> = None;
        let candidates = [
            (Lateral::ChangeLeft, me.lane + 1 < LANE_COUNT, me.lane + 1),
            (Lateral::ChangeRight, me.lane > 0, me.lane.wrapping_sub(1)),
        ];
        for (dir, exists, lane) in candidates {
            if !exists {
                continue;
            }
            let speed = self.anticipated_speed(vehicles, i, lane);
            if speed <= current || !self.is_safe(vehicles, i, lane) {
                continue;
            }
            if best.map_or(true, |(_, s)| speed > s) {
                best = Some((dir, speed));
            }
        }
        best.map_or(Lateral::Stay, |(d, _)| d)
    }
}

/// Overtaking decision for a surrounding vehicle using the default rule.
pub fn surrounding_lane_change(vehicles: &[Vehicle], i: usize) -> Lateral {
    if vehicles[i].driver != DriverKind::Idm {
        return Lateral::Stay;
    }
    LaneChangeRule::default().intent(vehicles, i)
}
