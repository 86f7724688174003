#![no_main]

use libfuzzer_sys::fuzz_target;
use posekit::mesh::{parse_obj, write_obj};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(mesh) = parse_obj(text) {
        mesh.validate().expect("parsed meshes are valid");
        let again = parse_obj(&write_obj(&mesh)).expect("written meshes parse");
        assert_eq!(again.faces, mesh.faces);
    }
});
