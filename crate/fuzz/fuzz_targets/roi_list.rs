#![no_main]

use libfuzzer_sys::fuzz_target;
use prolif_core::roi::SortedRoiList;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(list) = SortedRoiList::parse(text) {
        for r in &list.rois {
            let _ = r.patch(&list.slide).origin();
        }
        let json = list.to_json();
        assert_eq!(SortedRoiList::parse(&json).expect("reparse").to_json(), json);
    }
});
