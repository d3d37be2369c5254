#![no_main]

use libfuzzer_sys::fuzz_target;
use percept_core::iqa::ModelManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = ModelManifest::parse(text) {
        m.config.validate().expect("parsed configs are valid");
    }
});
