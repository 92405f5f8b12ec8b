#![no_main]

use libfuzzer_sys::fuzz_target;
use prolif_core::pipeline::SlideResult;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(r) = SlideResult::parse(text) {
        let json = r.to_json();
        assert_eq!(SlideResult::parse(&json).expect("reparse").to_json(), json);
    }
});
