#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use svs_core::io::SceneManifest;

fuzz_target!(|s: &str| {
    if let Ok(m) = SceneManifest::parse(s, Path::new("manifest.txt")) {
        assert_eq!(SceneManifest::parse(&m.format(), Path::new("again.txt")).unwrap(), m);
    }
});
