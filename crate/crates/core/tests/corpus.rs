//! The checked-in fuzz seeds are valid inputs and survive the same round
//! trips the fuzz targets check.

use std::fs;
use std::path::PathBuf;

use rpf_core::env::{ScenarioConfig, TrafficState};
use rpf_core::harness::checkpoint::CheckpointManifest;
use rpf_core::harness::evaluate::read_metrics;
use rpf_core::harness::SessionConfig;
use rpf_core::nn::checkpoint::{decode_adam, decode_network, encode_adam, encode_network};
use rpf_core::replay::SharedReplayMemory;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            (path.display().to_string(), fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).unwrap()
}

#[test]
fn network_seeds() {
    for (name, bytes) in seeds("decode_network") {
        let net = decode_network::<f32>(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(encode_network(&net), bytes, "{name}");
        assert!(decode_network::<f64>(&bytes).is_err(), "{name}: dtype not checked");
    }
}

#[test]
fn adam_seeds() {
    for (name, bytes) in seeds("decode_adam") {
        let state = decode_adam::<f32>(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(encode_adam(&state), bytes, "{name}");
    }
}

#[test]
fn replay_seeds() {
    for (name, bytes) in seeds("decode_replay") {
        let memory = SharedReplayMemory::decode(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!memory.is_empty());
        assert_eq!(SharedReplayMemory::decode(&memory.encode()).unwrap(), memory, "{name}");
    }
}

#[test]
fn manifest_seeds() {
    for (name, bytes) in seeds("parse_manifest") {
        let m = CheckpointManifest::parse(text(&bytes)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(CheckpointManifest::parse(&m.to_json()).unwrap(), m);
    }
}

#[test]
fn scenario_seeds() {
    for (name, bytes) in seeds("parse_scenario") {
        let config = ScenarioConfig::parse(text(&bytes)).unwrap_or_else(|e| panic!("{name}: {e}"));
        TrafficState::reset(&config).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(ScenarioConfig::parse(&config.to_toml()).unwrap(), config);
    }
}

#[test]
fn session_config_seeds() {
    for (name, bytes) in seeds("parse_session_config") {
        let config = SessionConfig::default()
            .overlay(text(&bytes))
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(SessionConfig::default().overlay(&config.to_toml()).unwrap(), config);
    }
}

#[test]
fn metrics_seeds() {
    for (name, bytes) in seeds("parse_metrics") {
        let rows = read_metrics(bytes.as_slice()).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!rows.is_empty(), "{name}");
    }
}
