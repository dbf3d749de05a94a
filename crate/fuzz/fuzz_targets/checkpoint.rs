#![no_main]

use libfuzzer_sys::fuzz_target;
use svs_core::train::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode();
        assert_eq!(Checkpoint::decode(&bytes).unwrap().encode(), bytes);
    }
});
