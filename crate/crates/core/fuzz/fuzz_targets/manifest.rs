#![no_main]

use libfuzzer_sys::fuzz_target;
use radm_core::dataset::parse_manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_manifest(s) {
        for r in &records {
            assert!(!r.id.is_empty());
        }
    }
});
