#![no_main]

use libfuzzer_sys::fuzz_target;
use rpf_core::nn::checkpoint::{decode_adam, encode_adam};

fuzz_target!(|data: &[u8]| {
    if let Ok(state) = decode_adam::<f32>(data) {
        let bytes = encode_adam(&state);
        assert_eq!(decode_adam::<f32>(&bytes).map(|s| encode_adam(&s)).ok(), Some(bytes));
    }
});
