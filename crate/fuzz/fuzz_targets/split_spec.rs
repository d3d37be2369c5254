#![no_main]

use libfuzzer_sys::fuzz_target;
use percept_core::dataio::SplitSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(s) = SplitSpec::parse(text) {
        assert!(s.train_content_ids.is_disjoint(&s.test_content_ids));
        assert_eq!(SplitSpec::parse(&s.to_json().unwrap()).expect("round trip"), s);
    }
});
