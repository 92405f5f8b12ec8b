#![no_main]

use libfuzzer_sys::fuzz_target;
use prolif_core::tissue::TissueDoc;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(doc) = TissueDoc::parse(text) {
        let json = doc.to_json();
        assert_eq!(TissueDoc::parse(&json).expect("reparse").to_json(), json);
    }
});
