#![no_main]

use libfuzzer_sys::fuzz_target;
use percept_core::dataio::CorpusManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = CorpusManifest::parse(text) {
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(CorpusManifest::parse(&json).expect("round trip"), m);
        let _ = m.enhanced_by_content();
    }
});
