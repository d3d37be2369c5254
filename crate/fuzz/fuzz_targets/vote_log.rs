#![no_main]

use libfuzzer_sys::fuzz_target;
use percept_core::study::{aggregate, parse_vote_log};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(votes) = parse_vote_log(text) {
        for v in &votes {
            v.validate().expect("parsed records are valid");
        }
        // aggregation may reject the log but must not panic
        let _ = aggregate(&votes, 0.8);
    }
});
