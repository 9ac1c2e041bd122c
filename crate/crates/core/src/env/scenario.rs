//! Episode construction: the nominal randomized highway and the
//! out-of-distribution test situations.
//!
//! Scenario files are TOML, for example
//!
//! ```toml
//! kind = "stopped_vehicle"
//! seed = 7
//!
//! [stopped_vehicle]
//! distance = 300.0
//! ```

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::driver::IdmParams;
use super::vehicle::{DriverKind, Vehicle};
use super::{CAR_LENGTH, EGO_LENGTH, EGO_MAX_SPEED, LANE_COUNT, TIME_GAP};
use crate::error::{Error, Result};

/// Front-bumper position of the ego vehicle at the start of every episode.
pub const EGO_START_X: f64 = 1000.0;
/// Clearance between the ego and the nearest spawn position, m.
const SPAWN_CLEARANCE: f64 = 30.0;
/// Length of the spawn regions ahead of and behind the ego, m.
const SPAWN_SPAN: f64 = 600.0;
const SPAWN_ATTEMPTS: usize = 2000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    #[default]
    Nominal,
    StoppedVehicle,
    SpeedingVehicle,
    Oncoming,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Nominal => "nominal",
            ScenarioKind::StoppedVehicle => "stopped",
            ScenarioKind::SpeedingVehicle => "speeder",
            ScenarioKind::Oncoming => "oncoming",
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nominal" => Ok(ScenarioKind::Nominal),
            "stopped" | "stopped_vehicle" => Ok(ScenarioKind::StoppedVehicle),
            "speeder" | "speeding_vehicle" => Ok(ScenarioKind::SpeedingVehicle),
            "oncoming" => Ok(ScenarioKind::Oncoming),
            other => Err(Error::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoppedVehicleOverrides {
    /// Distance from the ego front bumper to the stopped vehicle, m.
    pub distance: f64,
    /// Speeds of the slow vehicles in the center lane, m/s.
    pub blocker_speeds: Vec<f64>,
}

impl Default for StoppedVehicleOverrides {
    fn default() -> Self {
        StoppedVehicleOverrides {
            distance: 300.0,
            blocker_speeds: vec![15.0, 16.5, 18.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeedingVehicleOverrides {
    pub speed: f64,
    /// How far behind the ego the speeder starts, m.
    pub distance_behind: f64,
    pub slow_leader_speed: f64,
    /// Bumper-to-bumper gap to the slow leader, m.
    pub slow_leader_gap: f64,
}

impl Default for SpeedingVehicleOverrides {
    fn default() -> Self {
        SpeedingVehicleOverrides {
            speed: 55.0,
            distance_behind: 150.0,
            slow_leader_speed: 15.0,
            slow_leader_gap: 70.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OncomingOverrides {
    /// Speed of the oncoming vehicle; negative means against traffic.
    pub speed: f64,
    pub distance: f64,
}

impl Default for OncomingOverrides {
    fn default() -> Self {
        OncomingOverrides {
            speed: -25.0,
            distance: 400.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub seed: u64,
    /// Number of surrounding cars in the nominal scenario.
    pub vehicle_count: usize,
    /// Range of desired speeds of nominal surrounding cars, m/s.
    pub speed_range: [f64; 2],
    pub ego_speed: Option<f64>,
    pub ego_lane: Option<usize>,
    pub stopped_vehicle: Option<StoppedVehicleOverrides>,
    pub speeding_vehicle: Option<SpeedingVehicleOverrides>,
    pub oncoming: Option<OncomingOverrides>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            kind: ScenarioKind::Nominal,
            seed: 0,
            vehicle_count: 25,
            speed_range: [15.0, 35.0],
            ego_speed: None,
            ego_lane: None,
            stopped_vehicle: None,
            speeding_vehicle: None,
            oncoming: None,
        }
    }
}

impl ScenarioConfig {
    pub fn nominal(vehicle_count: usize) -> Self {
        ScenarioConfig {
            vehicle_count,
            ..Self::default()
        }
    }

    pub fn of_kind(kind: ScenarioKind) -> Self {
        ScenarioConfig {
            kind,
            ..Self::default()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ScenarioConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("scenario file: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading scenario {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.speed_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
            return Err(Error::Config(format!("speed range [{lo}, {hi}] is invalid")));
        }
        if let Some(v) = self.ego_speed {
            if !(0.0..=EGO_MAX_SPEED).contains(&v) {
                return Err(Error::Config(format!("ego speed {v} outside [0, {EGO_MAX_SPEED}]")));
            }
        }
        if let Some(l) = self.ego_lane {
            if l >= LANE_COUNT {
                return Err(Error::Config(format!("ego lane {l} does not exist")));
            }
        }
        let overrides = [
            (ScenarioKind::StoppedVehicle, self.stopped_vehicle.is_some()),
            (ScenarioKind::SpeedingVehicle, self.speeding_vehicle.is_some()),
            (ScenarioKind::Oncoming, self.oncoming.is_some()),
        ];
        for (kind, present) in overrides {
            if present && kind != self.kind {
                return Err(Error::Config(format!(
                    "{} overrides given for a {} scenario",
                    kind.name(),
                    self.kind.name()
                )));
            }
        }
        if let Some(s) = &self.stopped_vehicle {
            if !(s.distance.is_finite() && s.distance > EGO_LENGTH) {
                return Err(Error::Config(format!("stopped vehicle distance {}", s.distance)));
            }
            if s.blocker_speeds.len() > 16 || s.blocker_speeds.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Config("blocker speeds must be at most 16 finite non-negative values".into()));
            }
        }
        if let Some(s) = &self.speeding_vehicle {
            let fields = [s.speed, s.distance_behind, s.slow_leader_speed, s.slow_leader_gap];
            if fields.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Config("speeding vehicle fields must be positive".into()));
            }
        }
        if let Some(o) = &self.oncoming {
            if !(o.speed.is_finite() && o.distance.is_finite() && o.distance > 0.0) {
                return Err(Error::Config("oncoming fields must be finite".into()));
            }
        }
        Ok(())
    }
}

fn ego(x: f64, lane: usize, speed: f64) -> Vehicle {
    Vehicle {
        is_ego: true,
        ..Vehicle::car(0, x, lane, speed, EGO_MAX_SPEED, EGO_LENGTH)
    }
}

/// Gap a follower needs behind a leader at spawn time. The ego also starts
/// outside the penalized time gap.
fn spawn_gap(follower: &Vehicle, leader: &Vehicle) -> f64 {
    let idm = IdmParams::default();
    let gap = idm.desired_gap(follower.vx, leader.vx);
    if follower.is_ego {
        gap.max(idm.min_gap + TIME_GAP * follower.vx)
    } else {
        gap
    }
}

fn placement_ok(placed: &[Vehicle], candidate: &Vehicle) -> bool {
    placed.iter().filter(|v| v.lane == candidate.lane).all(|v| {
        let (follower, leader) = if v.x <= candidate.x { (v, candidate) } else { (candidate, v) };
        leader.rear() - follower.x >= spawn_gap(follower, leader)
    })
}

/// Draws the nominal surrounding cars: desired speeds uniform in
/// `speed_range`, cars slower than the ego's maximum speed ahead of it and
/// faster ones behind, rejection-sampled so that no one starts inside a
/// safe following distance. `ego` reserves its own slot when present.
pub fn spawn_surrounding<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    ego: Option<&Vehicle>,
    rng: &mut R,
) -> Result<Vec<Vehicle>> {
    let [lo, hi] = config.speed_range;
    let mut placed: Vec<Vehicle> = ego.cloned().into_iter().collect();
    let reserved = placed.len();
    for n in 0..config.vehicle_count {
        let desired = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let mut accepted = None;
        for _ in 0..SPAWN_ATTEMPTS {
            let lane = rng.gen_range(0..LANE_COUNT);
            let offset = rng.gen_range(0.0..SPAWN_SPAN);
            let x = if desired < EGO_MAX_SPEED {
                EGO_START_X + SPAWN_CLEARANCE + CAR_LENGTH + offset
            } else {
                EGO_START_X - EGO_LENGTH - SPAWN_CLEARANCE - offset
            };
            let car = Vehicle::car(n as u32 + 1, x, lane, desired, desired, CAR_LENGTH);
            if placement_ok(&placed, &car) {
                accepted = Some(car);
                break;
            }
        }
        match accepted {
            Some(car) => placed.push(car),
            None => {
                return Err(Error::Config(format!(
                    "could not place vehicle {} of {} without conflicts",
                    n + 1,
                    config.vehicle_count
                )))
            }
        }
    }
    Ok(placed.split_off(reserved))
}

/// Initial vehicles (ego first) for a scenario.
pub fn build_vehicles<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<Vec<Vehicle>> {
    config.validate()?;
    let x0 = EGO_START_X;
    match config.kind {
        ScenarioKind::Nominal => {
            let lane = config.ego_lane.unwrap_or_else(|| rng.gen_range(0..LANE_COUNT));
            let speed = config.ego_speed.unwrap_or_else(|| rng.gen_range(15.0..EGO_MAX_SPEED));
            let ego = ego(x0, lane, speed);
            let mut vehicles = vec![ego.clone()];
            vehicles.extend(spawn_surrounding(config, Some(&ego), rng)?);
            Ok(vehicles)
        }
        ScenarioKind::StoppedVehicle => {
            let o = config.stopped_vehicle.clone().unwrap_or_default();
            let lane = config.ego_lane.unwrap_or(0);
            let mut vehicles = vec![ego(x0, lane, config.ego_speed.unwrap_or(EGO_MAX_SPEED))];
            vehicles.push(Vehicle {
                driver: DriverKind::Stationary,
                out_of_distribution: true,
                ..Vehicle::car(1, x0 + o.distance, lane, 0.0, 0.0, CAR_LENGTH)
            });
            // Slowest blocker furthest back so the column never bunches up.
            let mut speeds = o.blocker_speeds.clone();
            speeds.sort_by(f64::total_cmp);
            let blocker_lane = if lane == 1 { 2 } else { 1 };
            for (k, &v) in speeds.iter().enumerate() {
                let x = x0 - 30.0 + 50.0 * k as f64;
                vehicles.push(Vehicle::car(k as u32 + 2, x, blocker_lane, v, v, CAR_LENGTH));
            }
            Ok(vehicles)
        }
        ScenarioKind::SpeedingVehicle => {
            let o = config.speeding_vehicle.clone().unwrap_or_default();
            let lane = config.ego_lane.unwrap_or(0);
            let ego = ego(x0, lane, config.ego_speed.unwrap_or(EGO_MAX_SPEED));
            let speeder_lane = if lane + 1 < LANE_COUNT { lane + 1 } else { lane - 1 };
            let leader_x = x0 + o.slow_leader_gap + CAR_LENGTH;
            let speeder = Vehicle {
                out_of_distribution: true,
                ..Vehicle::car(1, x0 - o.distance_behind, speeder_lane, o.speed, o.speed, CAR_LENGTH)
            };
            let slow = Vehicle::car(2, leader_x, lane, o.slow_leader_speed, o.slow_leader_speed, CAR_LENGTH);
            Ok(vec![ego, speeder, slow])
        }
        ScenarioKind::Oncoming => {
            let o = config.oncoming.clone().unwrap_or_default();
            let lane = config.ego_lane.unwrap_or(1);
            let ego = ego(x0, lane, config.ego_speed.unwrap_or(EGO_MAX_SPEED));
            let oncoming = Vehicle {
                driver: DriverKind::ConstantVelocity,
                out_of_distribution: true,
                ..Vehicle::car(1, x0 + o.distance, lane, o.speed, o.speed.abs(), CAR_LENGTH)
            };
            Ok(vec![ego, oncoming])
        }
    }
}

/// Generator for the per-episode seeds used by [`build_vehicles`].
pub fn episode_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
