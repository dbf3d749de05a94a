#![no_main]

use libfuzzer_sys::fuzz_target;
use svs_core::tensor::ParameterStore;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = ParameterStore::decode(data) {
        let bytes = store.encode();
        assert_eq!(ParameterStore::decode(&bytes).unwrap().encode(), bytes);
    }
});
