#![no_main]

use libfuzzer_sys::fuzz_target;
use rpf_core::env::{ScenarioConfig, TrafficState};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = ScenarioConfig::parse(text) {
        // Large vehicle counts only make spawning slow; keep iterations fast.
        if config.vehicle_count <= 40 {
            let _ = TrafficState::reset(&config);
        }
    }
});
