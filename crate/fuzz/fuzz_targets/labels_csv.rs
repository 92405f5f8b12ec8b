#![no_main]

use libfuzzer_sys::fuzz_target;
use prolif_core::scoring::{parse_labels_csv, write_labels_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rows) = parse_labels_csv(text) {
        let out = write_labels_csv(&rows);
        assert_eq!(write_labels_csv(&parse_labels_csv(&out).expect("reparse")), out);
    }
});
