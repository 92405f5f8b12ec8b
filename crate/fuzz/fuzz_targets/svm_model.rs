#![no_main]

use libfuzzer_sys::fuzz_target;
use prolif_core::scoring::{SvmModel, N_FEATURES};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(model) = SvmModel::parse(text) else {
        return;
    };
    let _ = model.predict_full(&[0.5; N_FEATURES]);
    let json = model.to_json();
    assert_eq!(SvmModel::parse(&json).expect("reparse").to_json(), json);
});
