#![no_main]

use libfuzzer_sys::fuzz_target;
use prolif_core::scoring::{parse_features_csv, write_features_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rows) = parse_features_csv(text) {
        let out = write_features_csv(&rows);
        assert_eq!(write_features_csv(&parse_features_csv(&out).expect("reparse")), out);
    }
});
