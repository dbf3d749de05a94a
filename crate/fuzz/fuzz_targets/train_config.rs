#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use svs_core::train::TrainConfig;

fuzz_target!(|s: &str| {
    if let Ok(c) = TrainConfig::parse(s, Path::new("run.cfg")) {
        c.validate().unwrap();
    }
});
