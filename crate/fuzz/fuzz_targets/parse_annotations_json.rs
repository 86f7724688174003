#![no_main]

use libfuzzer_sys::fuzz_target;
use posekit::dataio::parse_annotations_json;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(file) = parse_annotations_json(text) {
        let again = parse_annotations_json(&file.to_json()).expect("serialized annotations parse");
        assert_eq!(again, file);
    }
});
