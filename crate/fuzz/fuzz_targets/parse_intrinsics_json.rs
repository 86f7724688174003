#![no_main]

use libfuzzer_sys::fuzz_target;
use posekit::dataio::parse_intrinsics_json;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(k) = parse_intrinsics_json(text) {
        k.validate().expect("parsed intrinsics are valid");
    }
});
