#![no_main]

use libfuzzer_sys::fuzz_target;
use prolif_core::patches::{parse_jsonl, to_jsonl};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(patches) = parse_jsonl(text) {
        for p in &patches {
            let _ = p.origin();
        }
        let out = to_jsonl(&patches);
        assert_eq!(to_jsonl(&parse_jsonl(&out).expect("reparse")), out);
    }
});
