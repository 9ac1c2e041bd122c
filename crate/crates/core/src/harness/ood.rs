//! Replays of the out-of-distribution scenarios with per-step uncertainty.

use std::io::Write;

use crate::agent::{Agent, Decision};
use crate::env::{observe, EgoAction, ScenarioConfig, ScenarioKind, TrafficState};
use crate::error::{Error, Result};
use crate::safety::UncertaintyReport;

use super::trainer::AnyAgent;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gate {
    Off,
    /// Only actions with `c_v < cv_safe`, otherwise the fallback.
    On { cv_safe: f64 },
}

/// State after one decision.
#[derive(Clone, Debug, PartialEq)]
pub struct OodRow {
    /// 1-based.
    pub step: u32,
    pub ego_x: f64,
    pub ego_y: f64,
    pub ego_lane: usize,
    pub ego_vx: f64,
    pub action: EgoAction,
    pub reward: f64,
    pub collision: bool,
    pub off_road: bool,
    pub near_collision: bool,
    /// Vehicles in the observation the decision was made on.
    pub observed_vehicles: usize,
    /// Longitudinal offset of the nearest scenario vehicle from the ego, at
    /// decision time.
    pub ood_dx: Option<f64>,
    pub report: Option<UncertaintyReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OodTrace {
    pub kind: ScenarioKind,
    pub gate: Gate,
    pub rows: Vec<OodRow>,
}

impl OodTrace {
    pub fn collided(&self) -> bool {
        self.rows.iter().any(|r| r.collision || r.off_road)
    }

    /// Largest finite `c_v` of a chosen action.
    pub fn max_chosen_cv(&self) -> Option<f64> {
        self.rows
            .iter()
            .filter_map(|r| r.report.as_ref())
            .map(|r| r.chosen_cv())
            .filter(|c| c.is_finite())
            .max_by(f64::total_cmp)
    }

    pub fn fallback_steps(&self) -> usize {
        self.rows.iter().filter(|r| r.report.as_ref().is_some_and(|r| r.fallback_used)).count()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "step",
            "ego_x",
            "ego_y",
            "ego_lane",
            "ego_vx",
            "reward",
            "collision",
            "off_road",
            "near_collision",
            "observed_vehicles",
            "ood_dx",
        ]
        .map(String::from)
        .to_vec();
        header.extend(UncertaintyReport::csv_header(EgoAction::COUNT));
        w.write_record(&header).map_err(|e| Error::format("trace", e.to_string()))?;
        for r in &self.rows {
            let mut rec = vec![
                r.step.to_string(),
                r.ego_x.to_string(),
                r.ego_y.to_string(),
                r.ego_lane.to_string(),
                r.ego_vx.to_string(),
                r.reward.to_string(),
                u8::from(r.collision).to_string(),
                u8::from(r.off_road).to_string(),
                u8::from(r.near_collision).to_string(),
                r.observed_vehicles.to_string(),
                r.ood_dx.map_or(String::new(), |d| d.to_string()),
            ];
            match &r.report {
                Some(report) => rec.extend(report.csv_record()),
                None => {
                    rec.extend(std::iter::repeat_n(String::new(), 3 * EgoAction::COUNT));
                    rec.push(r.action.index().to_string());
                    rec.push(String::new());
                }
            }
            w.write_record(&rec).map_err(|e| Error::format("trace", e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("writing trace", e))
    }
}

/// Drives one episode of `scenario` with the agent's greedy policy (gate
/// off) or the gated ensemble policy (gate on).
pub fn run_ood_scenario(agent: &AnyAgent, scenario: &ScenarioConfig, gate: Gate) -> Result<OodTrace> {
    scenario.validate()?;
    let ensemble = agent.as_ensemble();
    if let Gate::On { .. } = gate {
        if ensemble.is_none_or(|e| e.members.len() < 2) {
            return Err(Error::Usage("the safety gate needs an ensemble of at least two members".into()));
        }
    }
    let mut state = TrafficState::reset(scenario)?;
    let mut rows = Vec::new();
    while !state.terminated {
        let obs = observe(&state);
        let decision = match (gate, ensemble) {
            (Gate::On { cv_safe }, Some(e)) => {
                let report = e.decide_safe(&obs, cv_safe)?;
                Decision {
                    action: report.action,
                    report: Some(report),
                }
            }
            _ => agent.decide(&obs)?,
        };
        let ood_dx = nearest_scenario_vehicle(&state);
        let info = state.advance(decision.action)?;
        let ego = state.ego();
        rows.push(OodRow {
            step: state.elapsed_steps,
            ego_x: ego.x,
            ego_y: ego.y,
            ego_lane: ego.lane,
            ego_vx: ego.vx,
            action: decision.action,
            reward: info.reward,
            collision: info.events.collision,
            off_road: info.events.off_road,
            near_collision: info.events.near_collision(),
            observed_vehicles: obs.vehicle_count(),
            ood_dx,
            report: decision.report,
        });
    }
    Ok(OodTrace {
        kind: scenario.kind,
        gate,
        rows,
    })
}

fn nearest_scenario_vehicle(state: &TrafficState) -> Option<f64> {
    let ego_x = state.ego().x;
    state
        .vehicles
        .iter()
        .filter(|v| v.out_of_distribution)
        .map(|v| v.x - ego_x)
        .min_by(|a, b| a.abs().total_cmp(&b.abs()))
}
