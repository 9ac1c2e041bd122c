#![no_main]

use libfuzzer_sys::fuzz_target;
use rpf_core::harness::SessionConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = SessionConfig::default().overlay(text) {
        assert_eq!(SessionConfig::default().overlay(&config.to_toml()).ok(), Some(config));
    }
});
