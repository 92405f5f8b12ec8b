//! PNM decoding must reject malformed headers and rasters without panicking.
#![no_main]

use libfuzzer_sys::fuzz_target;
use prolif_core::pnm;

fuzz_target!(|data: &[u8]| {
    let Ok(pixmap) = pnm::decode(data) else {
        return;
    };
    let again = pnm::decode(&pnm::encode(&pixmap)).expect("encoded pixmap decodes");
    assert!(again == pixmap);
});
