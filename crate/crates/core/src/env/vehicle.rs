use serde::{Deserialize, Serialize};

use super::{LANE_CHANGE_DURATION, LANE_COUNT, LANE_WIDTH};

/// How a non-ego vehicle chooses its longitudinal acceleration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriverKind {
    /// IDM car following plus the overtaking lane-change rule.
    Idm,
    /// Stands still and never moves.
    Stationary,
    /// Keeps its initial velocity (possibly negative) and lane.
    ConstantVelocity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: u32,
    /// Longitudinal position of the front bumper, m.
    pub x: f64,
    /// Lane the vehicle is in, or is leaving during a lane change. 0 is the
    /// rightmost lane.
    pub lane: usize,
    /// Lateral position, m; lane `l` is centered at `l · LANE_WIDTH`.
    pub y: f64,
    pub vx: f64,
    /// Lateral speed, positive to the left.
    pub vy: f64,
    pub length: f64,
    pub desired_speed: f64,
    /// Seconds spent in the current lane change, 0 when not changing.
    pub lane_change_progress: f64,
    pub target_lane: Option<usize>,
    pub is_ego: bool,
    pub driver: DriverKind,
    /// Set for vehicles that are deliberately outside the training
    /// distribution (stopped, speeding, oncoming).
    pub out_of_distribution: bool,
}

impl Vehicle {
    pub fn car(id: u32, x: f64, lane: usize, speed: f64, desired_speed: f64, length: f64) -> Self {
        Vehicle {
            id,
            x,
            lane,
            y: lane_center(lane),
            vx: speed,
            vy: 0.0,
            length,
            desired_speed,
            lane_change_progress: 0.0,
            target_lane: None,
            is_ego: false,
            driver: DriverKind::Idm,
            out_of_distribution: false,
        }
    }

    pub fn rear(&self) -> f64 {
        self.x - self.length
    }

    pub fn is_changing_lanes(&self) -> bool {
        self.target_lane.is_some()
    }

    /// A vehicle occupies its own lane and, mid-change, its target lane too.
    pub fn occupies(&self, lane: usize) -> bool {
        self.lane == lane || self.target_lane == Some(lane)
    }

    pub fn shares_lane_with(&self, other: &Vehicle) -> bool {
        self.occupies(other.lane) || other.target_lane.is_some_and(|l| self.occupies(l))
    }

    /// Starts a change toward `target`, which must be an adjacent lane.
    pub(crate) fn begin_lane_change(&mut self, target: usize) {
        debug_assert!(target < LANE_COUNT && target.abs_diff(self.lane) == 1);
        self.target_lane = Some(target);
        self.vy = if target > self.lane {
            super::LATERAL_SPEED
        } else {
            -super::LATERAL_SPEED
        };
        self.lane_change_progress = 0.0;
    }

    /// Lateral integration over one step; completes a change after
    /// `LANE_CHANGE_DURATION` seconds.
    pub(crate) fn advance_lateral(&mut self, dt: f64) {
        let Some(target) = self.target_lane else {
            return;
        };
        self.lane_change_progress += dt;
        self.y += self.vy * dt;
        if self.lane_change_progress >= LANE_CHANGE_DURATION - 1e-9 {
            self.lane = target;
            self.y = lane_center(target);
            self.vy = 0.0;
            self.lane_change_progress = 0.0;
            self.target_lane = None;
        }
    }
}

pub fn lane_center(lane: usize) -> f64 {
    lane as f64 * LANE_WIDTH
}

/// True when the bodies of two vehicles overlap (touching is not a
/// collision).
pub fn overlaps(a: &Vehicle, b: &Vehicle) -> bool {
    a.shares_lane_with(b) && a.rear() < b.x && b.rear() < a.x
}
