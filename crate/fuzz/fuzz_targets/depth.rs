#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use svs_core::io::depth::{decode_depth, DepthHeader};

// Header text, a NUL byte, then the raw buffer.
fuzz_target!(|data: &[u8]| {
    let Some(split) = data.iter().position(|&b| b == 0) else { return };
    let Ok(text) = std::str::from_utf8(&data[..split]) else { return };
    let path = Path::new("fuzz.depth");
    if let Ok(h) = DepthHeader::parse(text, path) {
        if let Ok(v) = decode_depth(&h, &data[split + 1..], path) {
            assert_eq!(v.len(), h.width * h.height);
        }
    }
});
