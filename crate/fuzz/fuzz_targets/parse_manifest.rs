#![no_main]

use libfuzzer_sys::fuzz_target;
use rpf_core::harness::checkpoint::CheckpointManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = CheckpointManifest::parse(text) {
        assert!(m.files.iter().all(|f| !f.name.contains('/') && !f.name.starts_with('.')));
    }
});
