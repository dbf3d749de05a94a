#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use svs_core::pose::parse_pose_path;

fuzz_target!(|s: &str| {
    let _ = parse_pose_path(s, Path::new("path.jsonl"));
});
