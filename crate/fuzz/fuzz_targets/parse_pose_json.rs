#![no_main]

use libfuzzer_sys::fuzz_target;
use posekit::dataio::parse_pose_json;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(pose) = parse_pose_json(text) {
        pose.validate().expect("parsed poses are valid");
    }
});
