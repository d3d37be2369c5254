#![no_main]

use libfuzzer_sys::fuzz_target;
use percept_core::study::{parse_scores_csv, scores_to_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(scores) = parse_scores_csv(text) {
        let again = parse_scores_csv(&scores_to_csv(&scores)).expect("written CSV parses");
        assert_eq!(again.len(), scores.len());
    }
});
