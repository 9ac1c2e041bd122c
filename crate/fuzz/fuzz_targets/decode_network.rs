#![no_main]

use libfuzzer_sys::fuzz_target;
use rpf_core::nn::checkpoint::{decode_network, encode_network};
use rpf_core::nn::NetworkParams;

fuzz_target!(|data: &[u8]| {
    if let Ok(net) = decode_network::<f32>(data) {
        let again: NetworkParams<f32> = decode_network(&encode_network(&net)).expect("re-encoded network decodes");
        assert_eq!(again.as_slice().len(), net.as_slice().len());
    }
    let _ = decode_network::<f64>(data);
});
