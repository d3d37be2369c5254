#![no_main]

use libfuzzer_sys::fuzz_target;
use percept_core::params::ParamStore;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = ParamStore::from_bytes(data) {
        let bytes = store.to_bytes();
        let again = ParamStore::from_bytes(&bytes).expect("re-encoded blob parses");
        assert_eq!(again.to_bytes(), bytes);
    }
});
