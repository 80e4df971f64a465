#![no_main]

use libfuzzer_sys::fuzz_target;
use radm_core::request::GenerateRequest;
use radm_core::ModelConfig;

fuzz_target!(|data: &[u8]| {
    match GenerateRequest::parse(data) {
        Ok(req) => {
            if let Err(e) = req.validate(&ModelConfig::tiny(), false) {
                assert!(matches!(e.status(), 400 | 404 | 422));
                assert!(!e.fields().is_empty());
            }
            let _ = req.inline_image();
        }
        Err(e) => assert_eq!(e.status(), 400),
    }
});
