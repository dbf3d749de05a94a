#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use svs_core::io::parse_cameras;

fuzz_target!(|s: &str| {
    let _ = parse_cameras(s, Path::new("cameras.txt"));
});
