#![no_main]

use libfuzzer_sys::fuzz_target;
use neurop_diff::data::decode_image;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_image(data) {
        assert_eq!(img.channels(), 3);
        assert!(img.values().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
});
