//! Per-step, per-vehicle trajectory export.

use std::io::Write;

use serde::Serialize;

use super::{StepEvents, Vehicle};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: u32,
    pub id: u32,
    pub is_ego: bool,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub lane_change_progress: f64,
    pub reward: f64,
    pub collision: bool,
    pub off_road: bool,
    pub emergency_brake_caused: bool,
    pub time_gap_violation: bool,
    pub lane_change_initiated: bool,
}

#[derive(Clone, Debug, Default)]
pub struct TrajectoryTrace {
    pub rows: Vec<TraceRow>,
}

impl TrajectoryTrace {
    /// Records the vehicles after step `step` with that step's reward and
    /// events. Step 0 is the initial state.
    pub fn record(&mut self, step: u32, vehicles: &[Vehicle], reward: f64, events: &StepEvents) {
        self.rows.extend(vehicles.iter().map(|v| TraceRow {
            step,
            id: v.id,
            is_ego: v.is_ego,
            x: v.x,
            y: v.y,
            vx: v.vx,
            vy: v.vy,
            lane_change_progress: v.lane_change_progress,
            reward,
            collision: events.collision,
            off_road: events.off_road,
            emergency_brake_caused: events.emergency_brake_caused,
            time_gap_violation: events.time_gap_violation,
            lane_change_initiated: events.lane_change_initiated,
        }));
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row).map_err(|e| crate::Error::Csv {
                path: "<trace>".into(),
                source: e,
            })?;
        }
        w.flush().map_err(|e| crate::Error::io("writing trace", e))
    }
}
