#![no_main]

use libfuzzer_sys::fuzz_target;
use radm_core::Layout;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(layout) = Layout::from_json(s) {
        let _ = layout.validate();
        let again = Layout::from_json(&layout.to_json()).expect("serialized layout parses");
        assert_eq!(again, layout);
    }
});
