#![no_main]

use libfuzzer_sys::fuzz_target;
use radm_core::checkpoint::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = decode_checkpoint(data, None) {
        let bytes = encode_checkpoint(&c.model, &c.meta.train, c.meta.step).expect("decoded checkpoint re-encodes");
        let again = decode_checkpoint(&bytes, Some(c.model.flags)).expect("re-encoded checkpoint decodes");
        let round = encode_checkpoint(&again.model, &again.meta.train, again.meta.step).unwrap();
        assert!(round == bytes, "encoding is not stable");
    }
});
