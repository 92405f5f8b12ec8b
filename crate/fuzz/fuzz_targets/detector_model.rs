#![no_main]

use libfuzzer_sys::fuzz_target;
use prolif_core::detect::{Detector, LogisticDetector};
use prolif_core::Pixmap;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(det) = LogisticDetector::parse(text) else {
        return;
    };
    let side = det.geometry().train_input;
    if side <= 256 {
        let patch = Pixmap::filled_rgb(side + 8, side + 8, [180, 120, 200]);
        let _ = det.score_map(&patch);
    }
});
