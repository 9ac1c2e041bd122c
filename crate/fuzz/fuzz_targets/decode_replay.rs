#![no_main]

use libfuzzer_sys::fuzz_target;
use rpf_core::replay::SharedReplayMemory;

fuzz_target!(|data: &[u8]| {
    if let Ok(memory) = SharedReplayMemory::decode(data) {
        // Decoding must give a memory that survives its own round trip.
        let again = SharedReplayMemory::decode(&memory.encode()).expect("re-encoded replay decodes");
        assert_eq!(again, memory);
    }
});
