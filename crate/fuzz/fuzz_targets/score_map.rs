//! Score maps arrive from detector plug-ins, so every field is untrusted.
#![no_main]

use libfuzzer_sys::fuzz_target;
use prolif_core::detect::{detect_mitoses, DetectParams, DetectorGeometry, ScoreMap};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(map) = ScoreMap::parse(text) else {
        return;
    };
    let _ = map.check_against(&DetectorGeometry::default(), 512, 512);
    if map.rows * map.cols <= 1 << 16 {
        let _ = detect_mitoses(&map, &DetectParams::default());
    }
});
