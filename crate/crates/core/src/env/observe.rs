use super::{TrafficState, Vehicle, EGO_MAX_SPEED, SENSOR_RANGE, TRAFFIC_SPEED_RANGE, Y_MAX};
use crate::nn::Observation;

fn sgn(v: f64) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Normalized network input for the ego vehicle `vehicles[0]`.
///
/// Ego part: lateral position, speed and lane-change direction. One block
/// per vehicle within sensor range, in vehicle order: relative position,
/// relative lateral position, relative speed (clamped) and lane-change
/// direction.
pub fn observe_vehicles(vehicles: &[Vehicle]) -> Observation {
    let ego = &vehicles[0];
    let head = [
        (2.0 * ego.y / Y_MAX - 1.0) as f32,
        (2.0 * ego.vx / EGO_MAX_SPEED - 1.0) as f32,
        sgn(ego.vy),
    ];
    let speed_span = TRAFFIC_SPEED_RANGE[1] - TRAFFIC_SPEED_RANGE[0];
    let blocks: Vec<[f32; 4]> = vehicles[1..]
        .iter()
        .filter(|v| (v.x - ego.x).abs() <= SENSOR_RANGE)
        .map(|v| {
            [
                ((v.x - ego.x) / SENSOR_RANGE) as f32,
                ((v.y - ego.y) / Y_MAX) as f32,
                ((v.vx - ego.vx) / speed_span).clamp(-1.0, 1.0) as f32,
                sgn(v.vy),
            ]
        })
        .collect();
    Observation::new(head, &blocks)
}

pub fn observe(state: &TrafficState) -> Observation {
    observe_vehicles(&state.vehicles)
}
