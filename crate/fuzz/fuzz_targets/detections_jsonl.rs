#![no_main]

use libfuzzer_sys::fuzz_target;
use prolif_core::detect::{detections_to_jsonl, parse_detections_jsonl};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(records) = parse_detections_jsonl(text) {
        let out = detections_to_jsonl(&records);
        assert_eq!(parse_detections_jsonl(&out).expect("reparse"), records);
    }
});
