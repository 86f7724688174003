#![no_main]

use libfuzzer_sys::fuzz_target;
use posekit::dataio::image::{decode_depth_png, encode_depth_png, MAX_SIDE};

fuzz_target!(|data: &[u8]| {
    if let Ok(image) = decode_depth_png(data) {
        assert!(image.width() <= MAX_SIDE as usize && image.height() <= MAX_SIDE as usize);
        let bytes = encode_depth_png(&image).expect("decoded images re-encode");
        assert_eq!(decode_depth_png(&bytes).expect("encoded images decode"), image);
    }
});
