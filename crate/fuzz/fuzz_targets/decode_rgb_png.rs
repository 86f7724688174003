#![no_main]

use libfuzzer_sys::fuzz_target;
use posekit::dataio::image::{decode_rgb_png, encode_rgb_png, MAX_SIDE};

fuzz_target!(|data: &[u8]| {
    if let Ok(image) = decode_rgb_png(data) {
        assert!(image.width() <= MAX_SIDE as usize && image.height() <= MAX_SIDE as usize);
        let bytes = encode_rgb_png(&image).expect("decoded images re-encode");
        assert_eq!(decode_rgb_png(&bytes).expect("encoded images decode"), image);
    }
});
