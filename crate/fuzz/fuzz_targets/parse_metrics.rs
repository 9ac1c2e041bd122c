#![no_main]

use libfuzzer_sys::fuzz_target;
use rpf_core::harness::evaluate::read_metrics;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_metrics(data) {
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.collision_free_fraction)));
    }
});
