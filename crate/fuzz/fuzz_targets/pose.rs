#![no_main]

use libfuzzer_sys::fuzz_target;
use svs_core::pose::PoseQuery;

fuzz_target!(|s: &str| {
    if let Ok(q) = PoseQuery::from_json(s) {
        q.validate().unwrap();
        let _ = q.to_camera();
    }
});
