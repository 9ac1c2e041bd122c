//! Three-lane one-way highway with a 1 s time step.
//!
//! The ego vehicle is always `vehicles[0]`. Surrounding vehicles follow
//! [`driver`]; the ego executes one of ten [`EgoAction`]s per step.

pub mod action;
pub mod driver;
pub mod heuristic;
pub mod observe;
pub mod scenario;
pub mod trace;
pub mod vehicle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use action::{EgoAction, Lateral};
pub use heuristic::heuristic_driver_policy;
pub use observe::observe;
pub use scenario::{ScenarioConfig, ScenarioKind};
pub use vehicle::{DriverKind, Vehicle};

pub const DT: f64 = 1.0;
pub const LANE_COUNT: usize = 3;
pub const LANE_WIDTH: f64 = 3.2;
/// Lateral position of the left road edge used for normalization, m.
pub const Y_MAX: f64 = LANE_WIDTH * LANE_COUNT as f64;
pub const LANE_CHANGE_DURATION: f64 = 4.0;
pub const LATERAL_SPEED: f64 = LANE_WIDTH / LANE_CHANGE_DURATION;
pub const EPISODE_STEPS: u32 = 100;
pub const SENSOR_RANGE: f64 = 200.0;
pub const EGO_LENGTH: f64 = 16.0;
pub const EGO_MAX_SPEED: f64 = 25.0;
pub const CAR_LENGTH: f64 = 5.0;
pub const ROAD_LENGTH: f64 = 5000.0;
/// Desired-speed range of nominal traffic, also used to scale relative
/// speeds in the observation.
pub const TRAFFIC_SPEED_RANGE: [f64; 2] = [15.0, 35.0];

pub const COLLISION_REWARD: f64 = -10.0;
pub const NEAR_COLLISION_REWARD: f64 = -10.0;
pub const LANE_CHANGE_REWARD: f64 = -1.0;
/// Braking harder than this behind the ego counts as an emergency, m/s².
pub const EMERGENCY_DECEL: f64 = 4.5;
/// Minimum time gap to the ego's leader, s.
pub const TIME_GAP: f64 = 2.5;
/// Speed at which the speed reward term reaches 1.
pub const REWARD_SPEED_NORMALIZER: f64 = EGO_MAX_SPEED;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvents {
    pub collision: bool,
    pub off_road: bool,
    pub emergency_brake_caused: bool,
    pub time_gap_violation: bool,
    pub lane_change_initiated: bool,
}

impl StepEvents {
    pub fn near_collision(&self) -> bool {
        self.emergency_brake_caused || self.time_gap_violation
    }

    pub fn crashed(&self) -> bool {
        self.collision || self.off_road
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficState {
    pub vehicles: Vec<Vehicle>,
    pub elapsed_steps: u32,
    pub terminated: bool,
    /// Seed the episode was generated from.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: TrafficState,
    pub reward: f64,
    pub terminated: bool,
    pub events: StepEvents,
}

/// Result of an in-place step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub reward: f64,
    pub terminated: bool,
    pub events: StepEvents,
}

/// Collisions present in a state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CollisionReport {
    pub ego: bool,
    /// Colliding pairs that do not involve the ego.
    pub background: usize,
}

/// Per-step reward: speed term `v/25` plus the event penalties.
pub fn compute_reward(ego_speed: f64, events: &StepEvents) -> f64 {
    let mut reward = 1.0 - (REWARD_SPEED_NORMALIZER - ego_speed) / REWARD_SPEED_NORMALIZER;
    if events.crashed() {
        reward += COLLISION_REWARD;
    }
    if events.near_collision() {
        reward += NEAR_COLLISION_REWARD;
    }
    if events.lane_change_initiated {
        reward += LANE_CHANGE_REWARD;
    }
    reward
}

/// Overlap-based collision check on a single snapshot.
pub fn collision_check(vehicles: &[Vehicle]) -> CollisionReport {
    let mut report = CollisionReport::default();
    for i in 0..vehicles.len() {
        for j in i + 1..vehicles.len() {
            if vehicle::overlaps(&vehicles[i], &vehicles[j]) {
                if vehicles[i].is_ego || vehicles[j].is_ego {
                    report.ego = true;
                } else {
                    report.background += 1;
                }
            }
        }
    }
    report
}

/// Collisions at the end of a step, including pairs that swapped order
/// between the two snapshots while sharing a lane (so a 1 s step cannot
/// tunnel through another vehicle).
fn step_collisions(before: &[(f64, f64)], after: &[Vehicle]) -> CollisionReport {
    let mut report = collision_check(after);
    for i in 0..after.len() {
        for j in i + 1..after.len() {
            let (a, b) = (&after[i], &after[j]);
            if !a.shares_lane_with(b) || vehicle::overlaps(a, b) {
                continue;
            }
            // Order flipped: i was behind j and is now ahead, or vice versa.
            let was_behind = before[i].0 <= before[j].1;
            let was_ahead = before[j].0 <= before[i].1;
            let now_behind = a.x <= b.rear();
            let now_ahead = b.x <= a.rear();
            if (was_behind && now_ahead) || (was_ahead && now_behind) {
                if a.is_ego || b.is_ego {
                    report.ego = true;
                } else {
                    report.background += 1;
                }
            }
        }
    }
    report
}

/// Ego command for one traffic step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoCommand {
    pub accel: f64,
    pub lateral: Lateral,
}

impl From<EgoAction> for EgoCommand {
    fn from(a: EgoAction) -> Self {
        EgoCommand {
            accel: a.acceleration(),
            lateral: a.lateral(),
        }
    }
}

/// Events produced by [`advance_traffic`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrafficEvents {
    pub ego: StepEvents,
    pub background_collisions: usize,
}

/// Advances every vehicle by one step. When `ego` is given, `vehicles[0]`
/// must be the ego vehicle and executes the command.
pub fn advance_traffic(vehicles: &mut [Vehicle], ego: Option<EgoCommand>) -> TrafficEvents {
    let mut events = TrafficEvents::default();
    let has_ego = ego.is_some();
    debug_assert!(!has_ego || vehicles[0].is_ego);

    // Lateral decisions, in index order so later deciders see earlier ones.
    if let Some(cmd) = ego {
        let me = &mut vehicles[0];
        if !me.is_changing_lanes() {
            let target = match cmd.lateral {
                Lateral::Stay => None,
                Lateral::ChangeLeft => Some(me.lane as isize + 1),
                Lateral::ChangeRight => Some(me.lane as isize - 1),
            };
            if let Some(t) = target {
                if t < 0 || t >= LANE_COUNT as isize {
                    events.ego.off_road = true;
                } else {
                    me.begin_lane_change(t as usize);
                    events.ego.lane_change_initiated = true;
                }
            }
        }
    }
    let first = usize::from(has_ego);
    for i in first..vehicles.len() {
        if vehicles[i].x > ROAD_LENGTH {
            continue;
        }
        match driver::surrounding_lane_change(vehicles, i) {
            Lateral::Stay => {}
            Lateral::ChangeLeft => {
                let t = vehicles[i].lane + 1;
                vehicles[i].begin_lane_change(t);
            }
            Lateral::ChangeRight => {
                let t = vehicles[i].lane - 1;
                vehicles[i].begin_lane_change(t);
            }
        }
    }

    // Longitudinal accelerations from the post-decision lane occupancy.
    let mut accels = vec![0.0; vehicles.len()];
    for i in 0..vehicles.len() {
        let v = &vehicles[i];
        accels[i] = if has_ego && i == 0 {
            let cmd = ego.unwrap();
            cmd.accel.clamp(-v.vx / DT, (EGO_MAX_SPEED - v.vx).max(0.0) / DT)
        } else if v.x > ROAD_LENGTH {
            0.0
        } else {
            let mut a = driver::surrounding_accel(v, None);
            for (j, gap) in driver::leaders_of(vehicles, i) {
                let behind = driver::surrounding_accel(v, Some((gap, vehicles[j].vx)));
                if has_ego && j == 0 && behind < -EMERGENCY_DECEL {
                    events.ego.emergency_brake_caused = true;
                }
                a = a.min(behind);
            }
            if v.driver == DriverKind::Idm {
                a.max(-v.vx / DT)
            } else {
                a
            }
        };
    }

    let before: Vec<(f64, f64)> = vehicles.iter().map(|v| (v.x, v.rear())).collect();
    for (v, a) in vehicles.iter_mut().zip(&accels) {
        v.vx += a * DT;
        v.x += v.vx * DT;
        v.advance_lateral(DT);
    }

    let collisions = step_collisions(&before, vehicles);
    events.ego.collision = collisions.ego;
    events.background_collisions = collisions.background;

    if has_ego {
        let ego = &vehicles[0];
        if let Some((_, gap)) = driver::leader_of(vehicles, 0) {
            if gap >= 0.0 && gap < TIME_GAP * ego.vx {
                events.ego.time_gap_violation = true;
            }
        }
    }
    events
}

impl TrafficState {
    /// Builds the initial state of an episode from `config.seed`.
    pub fn reset(config: &ScenarioConfig) -> Result<Self> {
        let mut rng = scenario::episode_rng(config.seed);
        let vehicles = scenario::build_vehicles(config, &mut rng)?;
        Ok(TrafficState {
            vehicles,
            elapsed_steps: 0,
            terminated: false,
            seed: config.seed,
        })
    }

    pub fn ego(&self) -> &Vehicle {
        &self.vehicles[0]
    }

    /// Advances the episode in place.
    pub fn advance(&mut self, action: EgoAction) -> Result<StepInfo> {
        if self.terminated {
            return Err(Error::Usage("step called on a terminated episode".into()));
        }
        let events = advance_traffic(&mut self.vehicles, Some(action.into())).ego;
        self.elapsed_steps += 1;
        let reward = compute_reward(self.ego().vx, &events);
        self.terminated = events.crashed() || self.elapsed_steps >= EPISODE_STEPS;
        Ok(StepInfo {
            reward,
            terminated: self.terminated,
            events,
        })
    }

    /// Functional form of [`TrafficState::advance`].
    pub fn step(&self, action: EgoAction) -> Result<StepOutcome> {
        let mut state = self.clone();
        let info = state.advance(action)?;
        Ok(StepOutcome {
            state,
            reward: info.reward,
            terminated: info.terminated,
            events: info.events,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alone(lane: usize, speed: f64) -> TrafficState {
        let mut config = ScenarioConfig::nominal(0);
        config.ego_lane = Some(lane);
        config.ego_speed = Some(speed);
        TrafficState::reset(&config).unwrap()
    }

    fn act(accel: f64, lateral: Lateral) -> EgoAction {
        EgoAction::compose(accel, lateral).unwrap()
    }

    #[test]
    fn zero_vehicles_is_valid() {
        let s = alone(1, 20.0);
        assert_eq!(s.vehicles.len(), 1);
        assert!(s.ego().is_ego);
    }

    #[test]
    fn cruising_alone_at_max_speed() {
        let s = alone(1, 25.0);
        let out = s.step(act(0.0, Lateral::Stay)).unwrap();
        assert_eq!(out.state.ego().x - s.ego().x, 25.0);
        assert_eq!(out.reward, 1.0);
        assert!(!out.terminated);
    }

    #[test]
    fn speed_saturates_at_ego_max() {
        let s = alone(1, 25.0);
        let out = s.step(act(1.0, Lateral::Stay)).unwrap();
        assert_eq!(out.state.ego().vx, 25.0);
        let s = alone(1, 0.5);
        let out = s.step(EgoAction::HARD_BRAKE).unwrap();
        assert_eq!(out.state.ego().vx, 0.0);
    }

    #[test]
    fn leaving_the_road_terminates() {
        let s = alone(0, 20.0);
        let out = s.step(act(0.0, Lateral::ChangeRight)).unwrap();
        assert!(out.events.off_road);
        assert!(out.terminated);
        assert!((out.reward - (0.8 - 10.0)).abs() < 1e-12);
        let s = alone(2, 20.0);
        assert!(s.step(act(0.0, Lateral::ChangeLeft)).unwrap().events.off_road);
    }

    #[test]
    fn stepping_terminated_state_is_usage_error() {
        let s = alone(0, 20.0);
        let out = s.step(act(0.0, Lateral::ChangeRight)).unwrap();
        assert!(matches!(out.state.step(act(0.0, Lateral::Stay)), Err(Error::Usage(_))));
    }

    #[test]
    fn episode_times_out_after_100_steps() {
        let mut s = alone(1, 20.0);
        for k in 1..=EPISODE_STEPS {
            let info = s.advance(act(0.0, Lateral::Stay)).unwrap();
            assert_eq!(info.terminated, k == EPISODE_STEPS);
        }
    }

    #[test]
    fn reward_formula() {
        assert_eq!(compute_reward(25.0, &StepEvents::default()), 1.0);
        let lc = StepEvents {
            lane_change_initiated: true,
            ..Default::default()
        };
        assert!((compute_reward(12.5, &lc) - (-0.5)).abs() < 1e-12);
        let crash = StepEvents {
            collision: true,
            ..Default::default()
        };
        assert!((compute_reward(20.0, &crash) - (-9.2)).abs() < 1e-12);
        let worst = StepEvents {
            collision: true,
            off_road: true,
            emergency_brake_caused: true,
            time_gap_violation: true,
            lane_change_initiated: true,
        };
        assert_eq!(compute_reward(0.0, &worst), -21.0);
    }

    #[test]
    fn lane_change_takes_four_steps_and_cannot_be_aborted() {
        let mut s = alone(1, 20.0);
        let info = s.advance(act(0.0, Lateral::ChangeLeft)).unwrap();
        assert!(info.events.lane_change_initiated);
        assert_eq!(info.reward, 0.8 - 1.0);
        assert_eq!(s.ego().lane_change_progress, 1.0);
        for expected in [2.0, 3.0] {
            let info = s.advance(act(0.0, Lateral::ChangeRight)).unwrap();
            assert!(!info.events.lane_change_initiated);
            assert_eq!(s.ego().lane_change_progress, expected);
            assert!(s.ego().vy > 0.0);
        }
        s.advance(act(0.0, Lateral::Stay)).unwrap();
        assert_eq!(s.ego().lane, 2);
        assert_eq!(s.ego().lane_change_progress, 0.0);
        assert!((s.ego().y - 6.4).abs() < 1e-12);
    }

    fn with_cars(ego_lane: usize, cars: Vec<Vehicle>) -> Vec<Vehicle> {
        let mut v = vec![Vehicle {
            is_ego: true,
            ..Vehicle::car(0, 1000.0, ego_lane, 20.0, 25.0, EGO_LENGTH)
        }];
        v.extend(cars);
        v
    }

    #[test]
    fn overlap_geometry() {
        // Ego body spans [984, 1000].
        let gap_half = with_cars(1, vec![Vehicle::car(1, 983.5, 1, 20.0, 20.0, 5.0)]);
        assert!(!collision_check(&gap_half).ego);
        let touching = with_cars(1, vec![Vehicle::car(1, 1005.0, 1, 20.0, 20.0, 5.0)]);
        assert!(!collision_check(&touching).ego);
        let overlap = with_cars(1, vec![Vehicle::car(1, 1004.9, 1, 20.0, 20.0, 5.0)]);
        assert!(collision_check(&overlap).ego);
        let adjacent = with_cars(1, vec![Vehicle::car(1, 995.0, 2, 20.0, 20.0, 5.0)]);
        assert!(!collision_check(&adjacent).ego);
        let mut changing = adjacent;
        changing[0].begin_lane_change(2);
        assert!(collision_check(&changing).ego);
    }

    #[test]
    fn fast_closing_vehicles_cannot_tunnel() {
        let mut v = with_cars(1, vec![Vehicle {
            driver: DriverKind::ConstantVelocity,
            ..Vehicle::car(1, 1030.0, 1, -40.0, 40.0, 5.0)
        }]);
        let ev = advance_traffic(&mut v, Some(act(0.0, Lateral::Stay).into()));
        assert!(ev.ego.collision);
    }

    #[test]
    fn time_gap_violation_behind_leader() {
        // Gap 30 m at 20 m/s is 1.5 s.
        let mut v = with_cars(1, vec![Vehicle::car(1, 1035.0, 1, 20.0, 20.0, 5.0)]);
        v[1].desired_speed = 20.0;
        let ev = advance_traffic(&mut v, Some(act(0.0, Lateral::Stay).into()));
        assert!(ev.ego.time_gap_violation);
        let mut v = with_cars(1, vec![Vehicle::car(1, 1060.0, 1, 20.0, 20.0, 5.0)]);
        let ev = advance_traffic(&mut v, Some(act(0.0, Lateral::Stay).into()));
        assert!(!ev.ego.time_gap_violation);
    }

    #[test]
    fn hard_braking_in_front_of_tailgater_causes_emergency() {
        let mut v = with_cars(1, vec![Vehicle::car(1, 970.0, 1, 30.0, 30.0, 5.0)]);
        v[0].vx = 20.0;
        let ev = advance_traffic(&mut v, Some(EgoAction::HARD_BRAKE.into()));
        assert!(ev.ego.emergency_brake_caused);
    }

    #[test]
    fn determinism() {
        let config = ScenarioConfig::nominal(25).with_seed(1234);
        let run = || {
            let mut s = TrafficState::reset(&config).unwrap();
            let mut rewards = vec![];
            let mut k = 0;
            while !s.terminated {
                let a = EgoAction::from_index((k * 7) % 10).unwrap();
                rewards.push(s.advance(a).unwrap().reward);
                k += 1;
            }
            (s, rewards)
        };
        assert_eq!(run(), run());
    }
}
