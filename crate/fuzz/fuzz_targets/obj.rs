#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use svs_core::io::obj::parse_obj;

fuzz_target!(|s: &str| {
    if let Ok(mesh) = parse_obj(s, Path::new("fuzz.obj")) {
        let n = mesh.vertices().len() as u32;
        assert!(mesh.triangles().iter().flatten().all(|&i| i < n));
    }
});
