#![no_main]

use libfuzzer_sys::fuzz_target;
use svs_core::cache::{decode_cache, encode_cache};

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = decode_cache(data) {
        assert_eq!(c.features.len(), c.meta.sources);
        assert_eq!(c.depths.len(), c.meta.sources);
        let _ = encode_cache(&c);
    }
});
