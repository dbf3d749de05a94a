#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use svs_core::io::decode_png;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_png(data, Path::new("fuzz.png")) {
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
