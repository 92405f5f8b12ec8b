#![no_main]

use libfuzzer_sys::fuzz_target;
use prolif_core::slide::Manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = Manifest::parse(text) {
        let json = m.to_json();
        assert_eq!(Manifest::parse(&json).expect("reparse").to_json(), json);
    }
});
