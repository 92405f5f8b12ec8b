#![no_main]

use libfuzzer_sys::fuzz_target;
use prolif_core::synth::GroundTruth;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = GroundTruth::parse(text);
    }
});
