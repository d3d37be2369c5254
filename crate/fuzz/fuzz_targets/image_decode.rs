#![no_main]

use libfuzzer_sys::fuzz_target;
use percept_core::dataio::decode_image;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_image(data) {
        assert!(img.planes().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(img.planes().len(), 3 * img.height() * img.width());
    }
});
