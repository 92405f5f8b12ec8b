#![no_main]

use libfuzzer_sys::fuzz_target;
use prolif_core::stain::StainProfile;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(p) = StainProfile::parse(text) {
        let json = p.to_json();
        assert_eq!(StainProfile::parse(&json).expect("reparse").to_json(), json);
    }
});
