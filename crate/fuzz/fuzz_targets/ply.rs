#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use svs_core::io::ply::{format_ply, parse_ply};

fuzz_target!(|data: &[u8]| {
    if let Ok(mesh) = parse_ply(data, Path::new("fuzz.ply")) {
        let again = parse_ply(format_ply(&mesh).as_bytes(), Path::new("again.ply")).unwrap();
        assert_eq!(again.triangles(), mesh.triangles());
    }
});
