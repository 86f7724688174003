//! Versioned JSON schema for per-frame pose annotations.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "frames": {
//!     "0": { "quaternion": [1, 0, 0, 0], "translation_m": [0, 0, 0.6],
//!            "size_m": [0.1, 0.2, 0.1], "is_keyframe": true }
//!   }
//! }
//! ```
//! Quaternions are `[w, x, y, z]` and must be unit length within
//! [`QUATERNION_NORM_TOLERANCE`]; they are never normalized silently.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Rotation, Vec3};

pub const SCHEMA_VERSION: u32 = 1;
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-6;

/// A pose in interchange form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub quaternion: [f64; 4],
    pub translation_m: [f64; 3],
    pub size_m: [f64; 3],
}

impl PoseRecord {
    pub fn from_pose(pose: &Pose) -> Self {
        Self {
            quaternion: pose.rotation.quaternion(),
            translation_m: pose.translation.into(),
            size_m: pose.scale.into(),
        }
    }

    pub fn to_pose(&self) -> Result<Pose> {
        let norm = self.quaternion.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            let hint = if norm.is_finite() && norm > 0.0 {
                let q = self.quaternion.map(|c| c / norm);
                format!("; normalize it, e.g. [{}, {}, {}, {}]", q[0], q[1], q[2], q[3])
            } else {
                String::new()
            };
            return Err(Error::InvalidInput(format!(
                "quaternion has norm {norm}, expected 1 within {QUATERNION_NORM_TOLERANCE}{hint}"
            )));
        }
        // Keep the stored numbers so a save/load cycle is bit-identical.
        Pose::new(
            Rotation::from_unit_quaternion(self.quaternion),
            Vec3::from(self.translation_m),
            Vec3::from(self.size_m),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameAnnotation {
    #[serde(flatten)]
    pub pose: PoseRecord,
    pub is_keyframe: bool,
    /// Registration residual RMS against the governing keyframe, for propagated frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_rms_m: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub schema_version: u32,
    #[serde(default)]
    pub frames: BTreeMap<usize, FrameAnnotation>,
    /// Frames that propagation could not reach.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unpropagated: Vec<usize>,
}

impl Default for AnnotationFile {
    fn default() -> Self {
        Self { schema_version: SCHEMA_VERSION, frames: BTreeMap::new(), unpropagated: Vec::new() }
    }
}

impl AnnotationFile {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported annotation schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for (f, a) in &self.frames {
            a.pose.to_pose().map_err(|e| Error::InvalidInput(format!("frame {f}: {e}")))?;
        }
        Ok(())
    }

    pub fn keyframes(&self) -> Result<BTreeMap<usize, Pose>> {
        self.frames.iter().filter(|(_, a)| a.is_keyframe).map(|(&f, a)| Ok((f, a.pose.to_pose()?))).collect()
    }

    pub fn poses(&self) -> Result<BTreeMap<usize, Pose>> {
        self.frames.iter().map(|(&f, a)| Ok((f, a.pose.to_pose()?))).collect()
    }

    pub fn set_keyframe(&mut self, frame: usize, pose: &Pose) {
        self.frames
            .insert(frame, FrameAnnotation { pose: PoseRecord::from_pose(pose), is_keyframe: true, drift_rms_m: None });
        self.unpropagated.retain(|&f| f != frame);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotation serialization cannot fail")
    }
}

pub fn parse_annotations_json(text: &str) -> Result<AnnotationFile> {
    let file: AnnotationFile = serde_json::from_str(text)?;
    file.validate()?;
    Ok(file)
}

pub fn parse_pose_json(text: &str) -> Result<Pose> {
    serde_json::from_str::<PoseRecord>(text)?.to_pose()
}

pub fn read_annotations(path: &Path) -> Result<AnnotationFile> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Load { path: path.to_path_buf(), msg: e.to_string() })?;
    parse_annotations_json(&text)
}

/// Writes `contents` next to `path` and renames it into place, so readers see
/// either the old or the new file and never a partial one.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = dir.join(format!(".{name}.{}.{n}.tmp", std::process::id()));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn write_annotations(path: &Path, file: &AnnotationFile) -> Result<()> {
    write_atomic(path, file.to_json().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pose() -> Pose {
        Pose::new(
            Rotation::from_axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.4),
            Vec3::new(0.01, -0.02, 0.7),
            Vec3::new(0.1, 0.2, 0.15),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut f = AnnotationFile::default();
        f.set_keyframe(0, &pose());
        f.frames.insert(
            3,
            FrameAnnotation { pose: PoseRecord::from_pose(&pose()), is_keyframe: false, drift_rms_m: Some(0.0012) },
        );
        let back = parse_annotations_json(&f.to_json()).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.keyframes().unwrap()[&0], pose());
    }

    #[test]
    fn non_unit_quaternion_gets_a_hint() {
        let text = r#"{"quaternion": [2, 0, 0, 0], "translation_m": [0, 0, 1], "size_m": [1, 1, 1]}"#;
        match parse_pose_json(text) {
            Err(Error::InvalidInput(msg)) => assert!(msg.contains("normalize"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_version_and_unknown_fields_are_rejected() {
        assert!(matches!(parse_annotations_json(r#"{"schema_version": 9, "frames": {}}"#), Err(Error::Format(_))));
        assert!(parse_annotations_json(r#"{"schema_version": 1, "frames": {}, "extra": 1}"#).is_err());
        assert!(parse_annotations_json(r#"{"schema_version": 1, "frames": {"x": {}}}"#).is_err());
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn pose_records_round_trip(w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0,
                                   t in prop::array::uniform3(-2.0f64..2.0), s in prop::array::uniform3(0.01f64..1.0)) {
            prop_assume!(w * w + x * x + y * y + z * z > 1e-3);
            let pose = Pose::new(Rotation::from_quaternion([w, x, y, z]).unwrap(), Vec3::from(t), Vec3::from(s)).unwrap();
            let text = serde_json::to_string(&PoseRecord::from_pose(&pose)).unwrap();
            prop_assert_eq!(parse_pose_json(&text).unwrap(), pose);
        }
    }
}
