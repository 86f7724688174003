#![no_main]

use libfuzzer_sys::fuzz_target;
use posekit::dataio::points::{format_points, parse_points};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(points) = parse_points(text) {
        assert!(points.iter().all(|p| p.iter().all(|c| c.is_finite())));
        assert_eq!(parse_points(&format_points(&points)).expect("formatted points parse"), points);
    }
});
