#![no_main]

use libfuzzer_sys::fuzz_target;
use prolif_core::pipeline::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = PipelineConfig::parse(text) {
        let _ = cfg.patch_side(0.25);
        let json = cfg.to_json();
        assert_eq!(PipelineConfig::parse(&json).expect("reparse").to_json(), json);
    }
});
