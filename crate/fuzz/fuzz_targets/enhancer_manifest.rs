#![no_main]

use libfuzzer_sys::fuzz_target;
use percept_core::enhance::EnhancerManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = EnhancerManifest::parse(text) {
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(EnhancerManifest::parse(&json).expect("round trip"), m);
    }
});
