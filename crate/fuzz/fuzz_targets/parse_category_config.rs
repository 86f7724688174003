#![no_main]

use libfuzzer_sys::fuzz_target;
use posekit::dataio::parse_category_config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_category_config(text);
});
