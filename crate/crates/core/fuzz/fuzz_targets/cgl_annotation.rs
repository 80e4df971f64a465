#![no_main]

use libfuzzer_sys::fuzz_target;
use radm_core::dataset::{cgl_records, parse_cgl};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(file) = parse_cgl(s) {
        let (records, _) = cgl_records(&file);
        for r in &records {
            r.layout.validate().expect("ingested layouts are valid");
        }
    }
});
